"""Choosing where to cut the feature extractor into a part model and the rest.

Every candidate prefix gets an accuracy (from a freshly trained linear probe)
and a MAC count. Those series are turned into retained accuracy, accuracy
gained per extra MAC, and MAC reduction; each is min-max normalized across
the candidate set and combined by a harmonic-style fused score.
"""
from __future__ import annotations

import copy
import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .probe import fit_probe

PROBE_NOTE = "accuracy from a freshly trained linear probe on globally pooled prefix features"


def min_max_normalize(values: Sequence[float]) -> list[float]:
    """Scale to [0, 1]; an all-equal series maps to 0.5 and ``+inf`` maps to 1."""
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("cannot normalize an empty series")
    finite = [v for v in vals if math.isfinite(v)]
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 0.0)
    out = []
    for v in vals:
        if v == math.inf:
            out.append(1.0)
        elif not math.isfinite(v):
            raise ValueError(f"cannot normalize {v}")
        elif hi == lo:
            out.append(0.5)
        else:
            out.append((v - lo) / (hi - lo))
    return out


def fused_score(retained: float, gain: float, mac_reduction: float) -> float:
    """3xyz / (x + y + z) with x = 1 - normalized accuracy loss, y = normalized
    gain, z = normalized MAC reduction; zero when the denominator is zero."""
    if retained < 0 or gain < 0 or mac_reduction < 0:
        raise ValueError("fused score arguments must be nonnegative")
    denom = retained + gain + mac_reduction
    if denom == 0:
        return 0.0
    return 3.0 * retained * gain * mac_reduction / denom


@dataclass
class CandidateMetrics:
    index: int
    accuracy: float
    macs: int
    delta_acc: float | None
    delta_mac: int | None
    gain: float | None
    gain_norm: float
    acc_loss_ratio: float
    acc_loss_ratio_norm: float
    mac_reduction_ratio: float
    mac_reduction_ratio_norm: float
    fused_score: float
    part_beats_full: bool = False


@dataclass
class SplitReport:
    candidates: list[CandidateMetrics]
    optimal_index: int
    candidate_range: tuple[int, int]
    accuracy_full: float
    macs_full: int
    notes: list[str] = field(default_factory=list)

    @property
    def best(self) -> CandidateMetrics:
        return next(c for c in self.candidates if c.index == self.optimal_index)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for note in self.notes:
            buf.write(f"# {note}\n")
        buf.write(f"# accuracy_full={self.accuracy_full!r} macs_full={self.macs_full}\n")
        cols = list(asdict(self.candidates[0]).keys())
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for c in self.candidates:
            w.writerow(["" if v is None else v for v in asdict(c).values()])
        buf.write(f"# optimal_index={self.optimal_index}\n")
        return buf.getvalue()


def score_candidates(indices: Sequence[int], accuracies: Sequence[float], macs: Sequence[int],
                     accuracy_full: float, macs_full: int) -> SplitReport:
    """Two-pass fused-score search over precomputed (accuracy, MAC) pairs."""
    n = len(indices)
    if n < 2:
        raise ValueError("split search needs at least two candidates")
    if not (len(accuracies) == len(macs) == n):
        raise ValueError("indices, accuracies and macs must align")
    if accuracy_full <= 0 or macs_full <= 0:
        raise ValueError("full-model accuracy and MACs must be positive")
    if any(b < a for a, b in zip(macs, macs[1:])):
        raise ValueError("candidate MACs must be nondecreasing")

    d_acc: list[float | None] = [None]
    d_mac: list[int | None] = [None]
    gain: list[float | None] = [None]
    for i in range(1, n):
        da = accuracies[i] - accuracies[i - 1]
        dm = macs[i] - macs[i - 1]
        d_acc.append(da)
        d_mac.append(dm)
        gain.append(math.inf if dm == 0 else da / dm)
    r_a = [(accuracy_full - a) / accuracy_full for a in accuracies]
    r_m = [(macs_full - m) / macs_full for m in macs]

    g_norm = [0.0] + min_max_normalize(gain[1:])
    ra_norm = min_max_normalize(r_a)
    rm_norm = min_max_normalize(r_m)

    cands = []
    best, best_score = indices[0], 0.0
    for k in range(n):
        score = fused_score(1.0 - ra_norm[k], g_norm[k], rm_norm[k])
        if score > best_score:
            best, best_score = indices[k], score
        cands.append(CandidateMetrics(indices[k], float(accuracies[k]), int(macs[k]), d_acc[k], d_mac[k], gain[k],
                                      g_norm[k], r_a[k], ra_norm[k], r_m[k], rm_norm[k], score, r_a[k] < 0))
    notes = []
    if any(c.part_beats_full for c in cands):
        notes.append("some candidates score above the full model (negative accuracy loss)")
    return SplitReport(cands, best, (indices[0], indices[-1]), float(accuracy_full), int(macs_full), notes)


def default_range(n_blocks: int, lo: float = 0.25, hi: float = 0.85) -> tuple[int, int]:
    first = max(1, math.ceil(lo * n_blocks))
    last = max(first, math.floor(hi * n_blocks))
    return first, last


@dataclass
class ProbeData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max())) + 1


def _boundary_features(net: nn.BlockNet, x: np.ndarray, indices: Sequence[int], batch_size: int = 256):
    body = net.without_head()
    feats = {i: [] for i in indices}
    for start in range(0, len(x), batch_size):
        _, acts = nn.forward(body, x[start : start + batch_size])
        for i in indices:
            feats[i].append(nn.readout(acts.values[i]))
    return {i: np.concatenate(v) for i, v in feats.items()}


def evaluate_candidates(net: nn.BlockNet, probe: ProbeData, index_range: tuple[int, int] | None = None,
                        candidates: Sequence[int] | None = None, probe_epochs: int = 30, seed: int = 0):
    """Return ``(indices, accuracies, macs, accuracy_full, macs_full)``.

    Candidate ``i`` is the prefix ``blocks[:i]``. By default every index in
    the inclusive ``index_range`` is tried; ``candidates`` restricts that set.
    """
    n = len(net.blocks)
    lo, hi = index_range if index_range is not None else default_range(n)
    if lo < 1 or hi > n or lo > hi:
        raise ValueError(f"candidate range {lo}..{hi} outside 1..{n}")
    indices = [i for i in range(lo, hi + 1) if candidates is None or i in set(candidates)]
    if not indices:
        raise ValueError("empty candidate range")
    wanted = sorted(set(indices) | {n})
    f_train = _boundary_features(net, probe.x_train, wanted)
    f_test = _boundary_features(net, probe.x_test, wanted)
    body = net.without_head()
    acc = {}
    for i in wanted:
        clf = fit_probe(f_train[i], probe.y_train, probe.classes, epochs=probe_epochs, seed=seed + i)
        acc[i] = clf.accuracy(f_test[i], probe.y_test)
    macs = [nn.mac_count(nn.BlockNet(body.input_shape, body.blocks[:i])) for i in indices]
    return indices, [acc[i] for i in indices], macs, acc[n], nn.mac_count(body)


def find_optimal_split(net: nn.BlockNet, probe: ProbeData, index_range: tuple[int, int] | None = None,
                       candidates: Sequence[int] | None = None, probe_epochs: int = 30, seed: int = 0) -> SplitReport:
    indices, accs, macs, acc_full, mac_full = evaluate_candidates(net, probe, index_range, candidates,
                                                                   probe_epochs, seed)
    report = score_candidates(indices, accs, macs, acc_full, mac_full)
    report.candidate_range = index_range if index_range is not None else default_range(len(net.blocks))
    report.notes.insert(0, PROBE_NOTE)
    return report


def split_model(net: nn.BlockNet, index: int) -> tuple[nn.BlockNet, nn.BlockNet]:
    """Cut the extractor after ``index`` blocks. The head, if any, is dropped."""
    if not 0 <= index <= len(net.blocks):
        raise IndexError(f"split index {index} outside 0..{len(net.blocks)}")
    blocks = copy.deepcopy(net.blocks)
    part = nn.BlockNet(net.input_shape, blocks[:index])
    remainder = nn.BlockNet(part.feature_shape, blocks[index:])
    return part, remainder


def join_models(part: nn.BlockNet, remainder: nn.BlockNet) -> nn.BlockNet:
    if part.feature_shape != remainder.input_shape:
        raise nn.ShapeError("join_models", part.feature_shape, remainder.input_shape)
    return nn.BlockNet(part.input_shape, copy.deepcopy(part.blocks + remainder.blocks))
