"""MAC-proportional cost proxy for inference and on-device training.

Energy is reported as ``MACs x joules_per_mac``; with the default constant of
1.0 every figure is simply a MAC count. Board power, clock speed and runtime
are not modelled, so only ratios between configurations are meaningful.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction
from numbers import Rational

PROXY_NOTE = "proxy energy = MACs x joules_per_mac; board power and runtime are not modelled"


def expected_cost(mac_part, mac_full, ratio):
    """Mean per-sample MACs when a fraction ``ratio`` of samples exits at the part model.

    Exact (a :class:`~fractions.Fraction`) when all arguments are rational.
    """
    if not 0 <= ratio <= 1:
        raise ValueError(f"ratio {ratio} outside [0, 1]")
    if mac_part > mac_full:
        raise ValueError("mac_part exceeds mac_full")
    if all(isinstance(v, Rational) for v in (mac_part, mac_full, ratio)):
        ratio = Fraction(ratio)
    return mac_part + (1 - ratio) * (mac_full - mac_part)


def savings(baseline_cost: float, new_cost: float) -> float:
    """Percent saved relative to ``baseline_cost``."""
    if baseline_cost <= 0:
        raise ValueError("baseline cost must be positive")
    return 100.0 * (baseline_cost - new_cost) / baseline_cost


PLANS = ("classifier-only", "stage", "classifier+aux")


def training_cost(plan: str, iterations: int, extractor_macs: int, head_macs: int, *,
                  part_extractor_macs: int = 0, part_head_macs: int = 0, aux_macs: int = 0,
                  joules_per_mac: float = 1.0) -> float:
    """Proxy cost of ``iterations`` single-sample training steps.

    ``head_macs`` / ``part_head_macs`` are the per-step training MACs of a head
    (forward, gradient and update). ``classifier-only`` runs the extractor and
    trains one head; ``stage`` runs the full extractor once (part prefix
    included in ``extractor_macs``) and trains both heads; ``classifier+aux``
    adds ``aux_macs`` per step for trainable side modules.
    """
    if iterations <= 0:
        raise ValueError("iterations must be positive")
    per_step = extractor_macs + head_macs
    if plan == "stage":
        per_step += part_head_macs
    elif plan == "classifier+aux":
        if aux_macs < 0:
            raise ValueError("aux_macs must be nonnegative")
        per_step += aux_macs
    elif plan != "classifier-only":
        raise ValueError(f"unknown training plan {plan!r}; expected one of {PLANS}")
    return iterations * per_step * joules_per_mac


@dataclass
class CostReport:
    model: str
    ratio: float
    mac_part: int
    mac_full: int
    mac_baseline: int
    expected_macs: float
    proxy_energy: float
    savings_percent: float


def cost_report(model: str, mac_part: int, mac_full: int, ratio, mac_baseline: int | None = None,
                joules_per_mac: float = 1.0) -> CostReport:
    """Stage-decision cost against full-only inference.

    ``mac_full`` is the charge for a sample that continues past the part
    model; ``mac_baseline`` (default ``mac_full``) is full-model-only inference.
    """
    exp = expected_cost(mac_part, mac_full, ratio)
    base = mac_full if mac_baseline is None else mac_baseline
    return CostReport(model, float(ratio), int(mac_part), int(mac_full), int(base), float(exp),
                      float(exp) * joules_per_mac, savings(base, float(exp)))


COST_COLUMNS = ("model", "ratio", "mac_part", "mac_full", "expected_macs", "proxy_energy", "savings_percent")


def reports_to_csv(reports: list[CostReport]) -> str:
    buf = io.StringIO()
    buf.write(f"# {PROXY_NOTE}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COST_COLUMNS)
    for r in reports:
        w.writerow([r.model, repr(r.ratio), r.mac_part, r.mac_full, repr(r.expected_macs), repr(r.proxy_energy),
                    repr(r.savings_percent)])
    return buf.getvalue()
