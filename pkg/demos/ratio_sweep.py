"""
Sweeping the early-exit ratio
=============================

Uses the artifacts of a finished run (see end_to_end.py) to move the
confidence threshold and watch accuracy and mean MACs per image change.
"""
import sys
from pathlib import Path

import numpy as np

from microt import cost, pipeline, stage

out = Path(sys.argv[1])
pipe = pipeline.Pipeline(pipeline.PipelineConfig.load(out / "config.ini"), out)
model = pipe.staged_model()
x, y = pipe.data.local.subset("test")

# calibrating on the whole test population puts the median exactly in the middle
population = stage.calibrate(model, x)
targets = np.linspace(0.0, 1.0, 6)
rows = stage.sweep_ratio(population, model, x, stage.factors_for_ratios(population, targets), y)

print(f"{'ratio':>6} {'accuracy':>9} {'mean MACs':>10} {'saving':>7}")
for r in rows:
    saving = cost.savings(model.mac_full_only, r.expected_macs)
    print(f"{r.ratio:>6.2f} {r.accuracy:>9.4f} {r.expected_macs:>10.0f} {saving:>6.1f}%")

# random routing at the median ratio is the baseline confidence has to beat
routed = stage.route(population, model, x, y)
rand = stage.random_route(model, x, routed.ratio, seed=0, labels=y)
print(f"at ratio {routed.ratio:.2f}: confidence {routed.accuracy:.4f}, random {rand.accuracy:.4f}")
