"""Stage-decision inference: the part model answers when it is confident,
otherwise the remainder resumes from the cached boundary activation.

The confidence threshold is the median of part-model confidences over a few
calibration samples, multiplied by a user adjust factor.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import nn
from .device import DeviceClassifier, extractor_macs, run_extractor

CONFIDENCE_METRIC = "max-softmax-probability"


def confidence(probs: np.ndarray) -> np.ndarray | float:
    """Maximum class probability of a softmax output (row-wise for batches)."""
    p = np.asarray(probs, dtype=float)
    if p.shape[-1] < 1 or np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("confidence expects a probability simplex")
    c = p.max(axis=-1)
    return float(c) if np.ndim(c) == 0 else c


def median_sorted(values: Sequence[float]) -> float:
    """Median of an ascending sequence: the middle element, or the mean of the two middle ones."""
    n = len(values)
    if n == 0:
        raise ValueError("median of an empty sequence")
    if n % 2 == 1:
        return float(values[(n + 1) // 2 - 1])
    return (float(values[n // 2 - 1]) + float(values[n // 2])) / 2.0


@dataclass
class CalibrationResult:
    confidences: np.ndarray  # ascending
    median: float
    adjust_factor: float
    threshold: float

    @property
    def n_samples(self) -> int:
        return len(self.confidences)

    def with_factor(self, factor: float) -> "CalibrationResult":
        if factor <= 0:
            raise ValueError("adjust factor must be positive")
        return CalibrationResult(self.confidences, self.median, factor, self.median * factor)


def calibrate_confidences(confs: Sequence[float], adjust_factor: float = 1.0) -> CalibrationResult:
    if len(confs) == 0:
        raise ValueError("calibration needs at least one sample")
    if adjust_factor <= 0:
        raise ValueError("adjust factor must be positive")
    c = np.sort(np.asarray(confs, dtype=float))
    med = median_sorted(c)
    return CalibrationResult(c, med, float(adjust_factor), med * adjust_factor)


@dataclass
class StagedModel:
    """Part/remainder extractors with their two classifiers."""

    part: object  # nn.BlockNet | QuantNet
    remainder: object
    part_clf: DeviceClassifier
    full_clf: DeviceClassifier

    def __post_init__(self):
        self.mac_part_extractor = extractor_macs(self.part)
        self.mac_remainder = extractor_macs(self.remainder)

    @property
    def mac_exit(self) -> int:
        """Charge for a sample that exits at the part head."""
        return self.mac_part_extractor + self.part_clf.macs

    @property
    def mac_continue(self) -> int:
        """Charge for a sample resumed through the remainder (prefix charged once)."""
        return self.mac_exit + self.mac_remainder + self.full_clf.macs

    @property
    def mac_full_only(self) -> int:
        """Full-model-only inference without any stage decision."""
        return self.mac_part_extractor + self.mac_remainder + self.full_clf.macs

    def part_pass(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        boundary = run_extractor(self.part, x)
        return boundary, self.part_clf.predict_proba(nn.readout(boundary))

    def full_from_boundary(self, boundary: np.ndarray) -> np.ndarray:
        return self.full_clf.predict_proba(nn.readout(run_extractor(self.remainder, boundary)))

    def full_predict(self, x: np.ndarray) -> np.ndarray:
        return self.full_from_boundary(run_extractor(self.part, x)).argmax(axis=1)

    def part_predict(self, x: np.ndarray) -> np.ndarray:
        return self.part_pass(x)[1].argmax(axis=1)

    def part_confidences(self, x: np.ndarray) -> np.ndarray:
        return confidence(self.part_pass(x)[1])


def calibrate(model: StagedModel, samples: np.ndarray, adjust_factor: float = 1.0) -> CalibrationResult:
    if len(samples) == 0:
        raise ValueError("calibration needs at least one sample")
    return calibrate_confidences(model.part_confidences(samples), adjust_factor)


@dataclass
class RoutingOutcome:
    confidences: np.ndarray
    exited_early: np.ndarray
    predictions: np.ndarray
    macs: np.ndarray
    labels: np.ndarray | None = None
    ids: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.predictions)

    @property
    def ratio(self) -> float:
        return float(self.exited_early.mean()) if self.n else 0.0

    @property
    def exact_ratio(self) -> Fraction:
        return Fraction(int(self.exited_early.sum()), self.n)

    @property
    def accuracy(self) -> float:
        if self.labels is None:
            raise ValueError("no labels attached to this routing outcome")
        return float((self.predictions == self.labels).mean())

    @property
    def total_macs(self) -> int:
        return int(self.macs.sum())

    @property
    def mean_macs(self) -> Fraction:
        return Fraction(self.total_macs, self.n)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in self.metadata.items():
            buf.write(f"# {k}={v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "confidence", "exited_early", "prediction", "label", "macs"])
        ids = self.ids if self.ids is not None else np.arange(self.n)
        for i in range(self.n):
            label = "" if self.labels is None else int(self.labels[i])
            w.writerow([int(ids[i]), repr(float(self.confidences[i])), int(self.exited_early[i]),
                        int(self.predictions[i]), label, int(self.macs[i])])
        return buf.getvalue()


def _route_mask(model: StagedModel, x: np.ndarray, early: np.ndarray, confs, boundary, part_probs,
                labels, ids, metadata) -> RoutingOutcome:
    preds = part_probs.argmax(axis=1)
    late = ~early
    if late.any():
        preds[late] = model.full_from_boundary(boundary[late]).argmax(axis=1)
    macs = np.where(early, model.mac_exit, model.mac_continue).astype(np.int64)
    return RoutingOutcome(confs, early, preds, macs, None if labels is None else np.asarray(labels), ids, metadata)


def route(calib: CalibrationResult, model: StagedModel, x: np.ndarray, labels=None, ids=None) -> RoutingOutcome:
    """Exit at the part head when confidence >= threshold; otherwise resume the
    remainder from the boundary activation already computed."""
    boundary, part_probs = model.part_pass(x)
    confs = confidence(part_probs)
    early = confs >= calib.threshold
    meta = {"confidence_metric": CONFIDENCE_METRIC, "threshold": repr(calib.threshold),
            "median": repr(calib.median), "adjust_factor": repr(calib.adjust_factor),
            "calibration_samples": calib.n_samples}
    return _route_mask(model, x, early, confs, boundary, part_probs, labels, ids, meta)


def random_route(model: StagedModel, x: np.ndarray, ratio: float, seed: int, labels=None) -> RoutingOutcome:
    """Baseline: a random subset of ``round(ratio * M)`` samples exits early."""
    boundary, part_probs = model.part_pass(x)
    confs = confidence(part_probs)
    k = int(round(ratio * len(x)))
    early = np.zeros(len(x), dtype=bool)
    early[np.random.default_rng(seed).choice(len(x), size=k, replace=False)] = True
    return _route_mask(model, x, early, confs, boundary, part_probs, labels, None, {"routing": "random"})


def factors_for_ratios(calib: CalibrationResult, ratios: Sequence[float]) -> list[float]:
    """Adjust factors whose thresholds let roughly ``ratio`` of the calibration
    population exit early."""
    if calib.median <= 0:
        raise ValueError("median confidence must be positive")
    return [float(np.quantile(calib.confidences, 1.0 - r)) / calib.median for r in ratios]


@dataclass
class SweepRow:
    factor: float
    threshold: float
    ratio: float
    accuracy: float | None
    expected_macs: float


def sweep_ratio(calib: CalibrationResult, model: StagedModel, x: np.ndarray, factors: Sequence[float],
                labels=None) -> list[SweepRow]:
    rows = []
    for f in factors:
        if f <= 0:
            raise ValueError("adjust factors must be positive")
        out = route(calib.with_factor(f), model, x, labels)
        acc = out.accuracy if labels is not None else None
        rows.append(SweepRow(float(f), calib.median * f, out.ratio, acc, float(out.mean_macs)))
    return rows


def sweep_to_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["adjust_factor", "threshold", "ratio", "accuracy", "expected_macs"])
    for r in rows:
        w.writerow([repr(r.factor), repr(r.threshold), repr(r.ratio), "" if r.accuracy is None else repr(r.accuracy),
                    repr(r.expected_macs)])
    return buf.getvalue()
