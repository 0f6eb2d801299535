"""
A full desk-scale run, stage by stage
=====================================

Runs every pipeline stage with the default configuration and prints what
each one left behind. Takes about half a minute on a laptop CPU.
"""
import sys
import tempfile
from pathlib import Path

from microt import pipeline

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="desk-run-"))
cfg = pipeline.PipelineConfig()
pipe = pipeline.Pipeline(cfg, out)
out.mkdir(parents=True, exist_ok=True)
(out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")

for name in pipeline.STAGES:
    before = {p.name for p in out.iterdir()} if out.exists() else set()
    pipe.run_stage(name)
    new = sorted({p.name for p in out.iterdir()} - before)
    print(f"{name:<12} wrote {', '.join(new) if new else '(nothing new)'}")

print()
print((out / "summary.txt").read_text())
print("artifacts in", out)
