"""Simulated MCU side: single-layer classifiers trained one sample at a time,
stage-training of the part/full classifiers, and flash-backed feature storage
under explicit SRAM/flash accounting."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import nn
from .formats import FormatError, Reader, f32, u32
from .losses import cross_entropy
from .quant import QuantNet, quant_forward

FLOAT_BYTES = 4


class MemoryBudgetError(MemoryError):
    def __init__(self, counter: str, name: str, requested: int, live: int, limit: int):
        super().__init__(f"{counter} budget exceeded allocating {name!r}: "
                         f"{requested} bytes requested, {live} live, limit {limit}")
        self.counter = counter


class CapacityError(MemoryBudgetError):
    pass


@dataclass
class MemoryBudget:
    sram_limit: int = 640 * 1024
    flash_limit: int = 2 * 1024 * 1024
    live: dict = field(default_factory=lambda: {"sram": 0, "flash": 0})
    peak: dict = field(default_factory=lambda: {"sram": 0, "flash": 0})
    allocations: dict = field(default_factory=dict)

    def limit(self, counter: str) -> int:
        return {"sram": self.sram_limit, "flash": self.flash_limit}[counter]

    def alloc(self, counter: str, name: str, nbytes: int, error=MemoryBudgetError) -> None:
        nbytes = int(nbytes)
        if self.live[counter] + nbytes > self.limit(counter):
            raise error(counter, name, nbytes, self.live[counter], self.limit(counter))
        self.live[counter] += nbytes
        self.peak[counter] = max(self.peak[counter], self.live[counter])
        key = (counter, name)
        self.allocations[key] = self.allocations.get(key, 0) + nbytes

    def free(self, counter: str, name: str) -> int:
        nbytes = self.allocations.pop((counter, name), 0)
        self.live[counter] -= nbytes
        return nbytes

    def holds(self, counter: str, name: str) -> bool:
        return (counter, name) in self.allocations

    def reset_peak(self) -> None:
        self.peak = dict(self.live)


# --------------------------------------------------------------------------
# classifier


@dataclass(eq=False)
class DeviceClassifier:
    weight: np.ndarray  # (feature_dim, classes)
    bias: np.ndarray
    lr: float
    activation: str = "softmax"
    name: str = "classifier"

    def __post_init__(self):
        if self.weight.ndim != 2 or self.weight.shape[1] < 2:
            raise ValueError("classifier needs at least two classes")
        if self.activation != "softmax":
            raise ValueError(f"unsupported output activation {self.activation!r}")

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def classes(self) -> int:
        return self.weight.shape[1]

    @property
    def macs(self) -> int:
        return self.feature_dim * self.classes

    @property
    def sram_bytes(self) -> int:
        # weights, bias, output array and error array
        return FLOAT_BYTES * (self.feature_dim * self.classes + 3 * self.classes)

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return np.asarray(feats, dtype=float) @ self.weight + self.bias

    def predict_proba(self, feats):
        return nn.softmax(self.logits(feats))

    def predict(self, feats):
        return self.logits(feats).argmax(axis=-1)

    def accuracy(self, feats, labels) -> float:
        return float((self.predict(feats) == np.asarray(labels)).mean())

    def copy(self) -> "DeviceClassifier":
        return DeviceClassifier(self.weight.copy(), self.bias.copy(), self.lr, self.activation, self.name)

    # ---- MCLF v1 -------------------------------------------------------
    def dumps(self) -> bytes:
        return (MCLF_MAGIC + bytes([1]) + u32(self.feature_dim, self.classes) + f32(self.lr)
                + self.weight.astype("<f4").tobytes() + self.bias.astype("<f4").tobytes())

    @classmethod
    def loads(cls, raw: bytes, name: str = "classifier") -> "DeviceClassifier":
        r = Reader(raw, "MCLF")
        r.expect(MCLF_MAGIC, 1)
        d, c = r.u32(), r.u32()
        lr = r.f32()
        w = r.array("<f4", (d, c)).astype(np.float64)
        b = r.array("<f4", (c,)).astype(np.float64)
        if not r.at_end():
            raise FormatError("MCLF: trailing bytes")
        return cls(w, b, lr, name=name)

    def save(self, path):
        Path(path).write_bytes(self.dumps())

    @classmethod
    def load(cls, path, name: str = "classifier"):
        return cls.loads(Path(path).read_bytes(), name)


MCLF_MAGIC = b"MCLF"


def build_classifier(feature_dim: int, classes: int, lr: float, seed: int, budget: MemoryBudget | None = None,
                     name: str = "classifier", init: str = "uniform") -> DeviceClassifier:
    if feature_dim < 1:
        raise ValueError("feature_dim must be positive")
    if classes < 2:
        raise ValueError("classifier needs at least two classes")
    if init == "uniform":
        w = nn.new_head(feature_dim, classes, seed).dense.weight
    elif init == "zeros":
        w = np.zeros((feature_dim, classes))
    else:
        raise ValueError(f"unknown init {init!r}")
    clf = DeviceClassifier(w, np.zeros(classes), lr, name=name)
    if budget is not None:
        budget.alloc("sram", name, clf.sram_bytes)
    return clf


def train_step(clf: DeviceClassifier, features: np.ndarray, label: int) -> tuple[DeviceClassifier, float]:
    """One forward/backward/SGD update on exactly one sample; no momentum."""
    f = np.asarray(features, dtype=float).reshape(1, -1)
    if f.shape[1] != clf.feature_dim:
        raise nn.ShapeError("train_step features", (clf.feature_dim,), f.shape[1:])
    loss, dz = cross_entropy(f @ clf.weight + clf.bias, [label], return_grad=True)
    if not np.isfinite(loss):
        raise FloatingPointError(f"{clf.name}: non-finite loss")
    clf.weight -= clf.lr * (f.T @ dz)
    clf.bias -= clf.lr * dz.sum(axis=0)
    return clf, loss


def train_epochs(clf: DeviceClassifier, feats: np.ndarray, labels: np.ndarray, epochs: int,
                 shuffle_seed: int | None = None) -> list[float]:
    """Batch-size-one SGD over a feature set; returns the mean loss per epoch."""
    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(feats)) if rng is not None else range(len(feats))
        total = 0.0
        for i in order:
            _, loss = train_step(clf, feats[i], int(labels[i]))
            total += loss
        history.append(total / max(len(feats), 1))
    return history


# --------------------------------------------------------------------------
# extractors and stage-training


def run_extractor(ext: nn.BlockNet | QuantNet, x: np.ndarray) -> np.ndarray:
    """Boundary activation produced by a float or quantized extractor."""
    if isinstance(ext, QuantNet):
        return quant_forward(ext, x) if ext.layers else np.asarray(x, dtype=float)
    _, acts = nn.forward(ext, x)
    return acts.features


def extractor_macs(ext: nn.BlockNet | QuantNet) -> int:
    return nn.mac_count(ext.to_float() if isinstance(ext, QuantNet) else ext)


class CountingExtractor:
    """Wraps an extractor and counts forward invocations (per sample)."""

    def __init__(self, ext):
        self.ext = ext
        self.calls = 0
        self.samples = 0

    def __call__(self, x):
        self.calls += 1
        self.samples += len(x)
        return run_extractor(self.ext, x)


class StageCacheError(RuntimeError):
    pass


@dataclass
class StageCache:
    """Boundary activation of the current sample, valid until consumed once."""

    activation: np.ndarray | None = None
    token: object = None

    def capture(self, activation: np.ndarray, token) -> None:
        if self.activation is not None:
            raise StageCacheError(f"cache still holds sample {self.token!r}; continue it before capturing another")
        self.activation, self.token = activation, token

    def consume(self, token) -> np.ndarray:
        if self.activation is None or self.token != token:
            raise StageCacheError(f"no cached boundary activation for sample {token!r}")
        act, self.activation, self.token = self.activation, None, None
        return act


@dataclass
class StageTrainer:
    part: object
    remainder: object
    part_clf: DeviceClassifier
    full_clf: DeviceClassifier
    cache: StageCache = field(default_factory=StageCache)
    macs_executed: int = 0

    def __post_init__(self):
        self.part_ext = self.part if isinstance(self.part, CountingExtractor) else CountingExtractor(self.part)
        self.remainder_ext = (self.remainder if isinstance(self.remainder, CountingExtractor)
                              else CountingExtractor(self.remainder))
        self._mac_part = extractor_macs(self.part_ext.ext)
        self._mac_rest = extractor_macs(self.remainder_ext.ext)

    def part_pass(self, x: np.ndarray, label: int, token) -> tuple[np.ndarray, float]:
        """Run the part extractor, cache its boundary activation, train the part head."""
        boundary = self.part_ext(np.asarray(x, dtype=float)[None])
        self.cache.capture(boundary, token)
        feats = nn.readout(boundary)[0]
        _, loss = train_step(self.part_clf, feats, label)
        self.macs_executed += self._mac_part + head_train_macs(self.part_clf)
        return feats, loss

    def full_pass(self, label: int, token) -> tuple[np.ndarray, float]:
        """Resume from the cached boundary through the remainder, train the full head."""
        boundary = self.cache.consume(token)
        feats = nn.readout(self.remainder_ext(boundary))[0]
        _, loss = train_step(self.full_clf, feats, label)
        self.macs_executed += self._mac_rest + head_train_macs(self.full_clf)
        return feats, loss

    def step(self, x: np.ndarray, label: int, token=None):
        token = object() if token is None else token
        part_feats, lp = self.part_pass(x, label, token)
        full_feats, lf = self.full_pass(label, token)
        return part_feats, full_feats, lp, lf


def stage_train(part_clf: DeviceClassifier, full_clf: DeviceClassifier, part, remainder, x: np.ndarray,
                label: int) -> tuple[DeviceClassifier, DeviceClassifier]:
    """Single-sample stage-training: the part extractor runs exactly once."""
    StageTrainer(part, remainder, part_clf, full_clf).step(x, label)
    return part_clf, full_clf


def head_train_macs(clf: DeviceClassifier) -> int:
    """Forward, weight-gradient outer product and SGD update, each D x C."""
    return 3 * clf.macs


# --------------------------------------------------------------------------
# embedding storage (MFEA v1)
#
# header: b"MFEA" u8 version, 3 reserved bytes, u32 count, u32 dim   (16 bytes)
# record: u32 label, u32 crc32(payload), dim x f32                   (8 + 4 * dim)

MFEA_MAGIC = b"MFEA"
MFEA_HEADER = 16
RECORD_HEADER = 8


@dataclass
class EmbeddingRecord:
    label: int
    features: np.ndarray


def record_bytes(dim: int) -> int:
    return RECORD_HEADER + FLOAT_BYTES * dim


class EmbeddingStore:
    """Append-only feature store charged against the flash budget."""

    def __init__(self, path: str | Path, dim: int, budget: MemoryBudget | None = None, name: str | None = None):
        self.path = Path(path)
        self.dim = int(dim)
        self.budget = budget
        self.name = name or f"store:{self.path.name}"
        self.count = 0
        if budget is not None:
            budget.alloc("flash", self.name, MFEA_HEADER, error=CapacityError)
        self.path.write_bytes(MFEA_MAGIC + bytes([1, 0, 0, 0]) + u32(0, self.dim))

    def append(self, rec: EmbeddingRecord) -> None:
        feats = np.asarray(rec.features, dtype="<f4").ravel()
        if feats.size != self.dim:
            raise nn.ShapeError("EmbeddingStore.append", (self.dim,), feats.shape)
        if self.budget is not None:
            self.budget.alloc("flash", self.name, record_bytes(self.dim), error=CapacityError)
        payload = feats.tobytes()
        with open(self.path, "r+b") as fh:
            fh.seek(0, 2)
            fh.write(u32(int(rec.label), zlib.crc32(payload)) + payload)
            self.count += 1
            fh.seek(8)
            fh.write(u32(self.count))

    def extend(self, records: Iterable[EmbeddingRecord]) -> None:
        for rec in records:
            self.append(rec)


def store_embedding(store: EmbeddingStore, rec: EmbeddingRecord) -> None:
    store.append(rec)


def load_embeddings(path: str | Path) -> list[EmbeddingRecord]:
    r = Reader(Path(path).read_bytes(), "MFEA")
    r.expect(MFEA_MAGIC, 1)
    r.take(3)
    count, dim = r.u32(), r.u32()
    out = []
    for i in range(count):
        label, crc = r.u32(), r.u32()
        payload = r.take(FLOAT_BYTES * dim)
        if zlib.crc32(payload) != crc:
            raise FormatError(f"MFEA: checksum mismatch in record {i}")
        out.append(EmbeddingRecord(label, np.frombuffer(payload, "<f4").astype(np.float64)))
    if not r.at_end():
        raise FormatError("MFEA: trailing bytes")
    return out


def stack_records(records: list[EmbeddingRecord]) -> tuple[np.ndarray, np.ndarray]:
    if not records:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    return np.stack([r.features for r in records]), np.array([r.label for r in records], dtype=np.int64)


def train_from_store(clf: DeviceClassifier, path: str | Path, epochs: int, budget: MemoryBudget | None = None,
                     shuffle_seed: int | None = None) -> list[float]:
    """Classifier-only training from stored features.

    The extractor's SRAM is released first; only one feature buffer is live
    alongside the classifier while training.
    """
    if budget is not None:
        budget.free("sram", "extractor")
    feats, labels = stack_records(load_embeddings(path))
    if budget is not None:
        budget.alloc("sram", f"{clf.name}:feature-buffer", FLOAT_BYTES * feats.shape[1])
    try:
        return train_epochs(clf, feats, labels, epochs, shuffle_seed)
    finally:
        if budget is not None:
            budget.free("sram", f"{clf.name}:feature-buffer")
