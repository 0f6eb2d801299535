"""Cloud side: SSL teacher training with guide/exploration models, embedding
extraction, knowledge distillation into the student, and joint fine-tuning
of the part and full models."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import Augmentation
from .formats import FormatError, Reader, f32, u32
from .losses import cross_entropy, joint_loss, mse, ssl_loss

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, stage: str, epoch: int, step: int, loss: float):
        super().__init__(f"{stage}: non-finite loss {loss} at epoch {epoch}, step {step}")
        self.stage, self.epoch, self.step, self.loss = stage, epoch, step, loss


@dataclass
class SslConfig:
    tau_guide: float = 0.04
    tau_explore: float = 0.1
    ema_momentum: float = 0.996
    # mean of guide logits subtracted before sharpening; 0 disables
    center_momentum: float = 0.9
    augmentation: Augmentation = field(default_factory=Augmentation)
    epochs: int = 10
    lr: float = 0.05
    batch_size: int = 64

    def __post_init__(self):
        if self.tau_guide <= 0 or self.tau_explore <= 0:
            raise ValueError("temperatures must be positive")
        if not 0 <= self.ema_momentum < 1:
            raise ValueError("ema_momentum must lie in [0, 1)")


@dataclass
class DistillConfig:
    alpha: float = 1.0
    beta: float = 1.0
    epochs: int = 10
    lr: float = 0.05
    batch_size: int = 64

    def __post_init__(self):
        for w in (self.alpha, self.beta):
            if not (np.isfinite(w) and w >= 0):
                raise ValueError("alpha and beta must be finite and nonnegative")


@dataclass
class TeacherPair:
    guide: nn.BlockNet
    explore: nn.BlockNet


def _check_same_arch(a: nn.BlockNet, b: nn.BlockNet) -> None:
    pa, pb = a.params(), b.params()
    if len(pa) != len(pb) or any(x.shape != y.shape for x, y in zip(pa, pb)):
        raise ValueError("guide and exploration networks have different architectures")


def ema_update(pair: TeacherPair, m: float) -> TeacherPair:
    """guide <- m * guide + (1 - m) * explore, parameter-wise and in place."""
    if not 0 <= m < 1:
        raise ValueError("EMA momentum must lie in [0, 1)")
    _check_same_arch(pair.guide, pair.explore)
    for g, e in zip(pair.guide.params(), pair.explore.params()):
        g *= m
        g += (1.0 - m) * e
    pair.guide.touch()
    return pair


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_teacher(init: nn.BlockNet, x: np.ndarray, cfg: SslConfig, seed: int) -> nn.BlockNet:
    """Self-supervised training; returns the guide network (with its projection head).

    ``init`` must carry a head: its logits are the guide/exploration outputs
    compared by :func:`ssl_loss`. Both networks start as copies of ``init``.
    """
    if len(x) == 0:
        raise ValueError("empty dataset")
    if init.head is None:
        raise ValueError("teacher network needs a projection head")
    rng = np.random.default_rng(seed)
    pair = TeacherPair(init.copy(), init.copy())
    center = np.zeros(init.head.dense.out_features)
    for epoch in range(cfg.epochs):
        for step, idx in enumerate(_batches(len(x), cfg.batch_size, rng)):
            v_guide = cfg.augmentation(x[idx], rng)
            v_explore = cfg.augmentation(x[idx], rng)
            _, ga = nn.forward(pair.guide, v_guide)
            _, ea = nn.forward(pair.explore, v_explore)
            loss, dz = ssl_loss(ga.logits - center, ea.logits, cfg.tau_guide, cfg.tau_explore, return_grad=True)
            if not np.isfinite(loss):
                raise TrainingDivergedError("teach-ssl", epoch, step, loss)
            nn.sgd_step(pair.explore, nn.backward(pair.explore, dz, ea, wrt="logits"), cfg.lr)
            ema_update(pair, cfg.ema_momentum)
            if cfg.center_momentum > 0:
                center = cfg.center_momentum * center + (1 - cfg.center_momentum) * ga.logits.mean(axis=0)
        log.debug("teach-ssl epoch %d loss %.4f", epoch, loss)
    return pair.guide


# --------------------------------------------------------------------------
# embedding dataset

MEMB_MAGIC = b"MEMB"


@dataclass
class EmbeddingDataset:
    ids: np.ndarray
    embeddings: np.ndarray  # (N, Q)
    labels: np.ndarray

    def __post_init__(self):
        if self.embeddings.ndim != 2 or not (len(self.ids) == len(self.embeddings) == len(self.labels)):
            raise ValueError("ids, embeddings and labels must align and embeddings must be 2-D")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def width(self) -> int:
        return self.embeddings.shape[1]

    def dumps(self) -> bytes:
        rec = np.zeros(len(self), dtype=[("id", "<u4"), ("label", "<u4"), ("emb", "<f4", (self.width,))])
        rec["id"], rec["label"], rec["emb"] = self.ids, self.labels, self.embeddings
        return MEMB_MAGIC + u32(len(self), self.width) + rec.tobytes()

    @classmethod
    def loads(cls, raw: bytes) -> "EmbeddingDataset":
        r = Reader(raw, "MEMB")
        r.expect(MEMB_MAGIC)
        count, width = r.u32(), r.u32()
        dt = np.dtype([("id", "<u4"), ("label", "<u4"), ("emb", "<f4", (width,))])
        rec = r.array(dt, (count,))
        if not r.at_end():
            raise FormatError("MEMB: trailing bytes")
        return cls(rec["id"].astype(np.int64), rec["emb"].astype(np.float64), rec["label"].astype(np.int64))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingDataset":
        return cls.loads(Path(path).read_bytes())


def features(net: nn.BlockNet, x: np.ndarray, batch_size: int = 256, upto: int | None = None) -> np.ndarray:
    """Read out per-sample feature vectors at boundary ``upto`` (default: last block)."""
    body = nn.BlockNet(net.input_shape, net.blocks[:upto] if upto is not None else net.blocks)
    out = []
    for start in range(0, len(x), batch_size):
        _, acts = nn.forward(body, x[start : start + batch_size])
        out.append(nn.readout(acts.features))
    return np.concatenate(out) if out else np.zeros((0,) + body.feature_shape[:1])


def extract_embeddings(teacher: nn.BlockNet, x: np.ndarray, labels=None, ids=None) -> EmbeddingDataset:
    """Teacher features taken before its head, one record per input, in order."""
    emb = features(teacher, x)
    ids = np.arange(len(x)) if ids is None else np.asarray(ids)
    labels = np.zeros(len(x), dtype=np.int64) if labels is None else np.asarray(labels)
    return EmbeddingDataset(ids.astype(np.int64), emb, labels.astype(np.int64))


# --------------------------------------------------------------------------
# distillation and joint training


def _dense(rng, din, dout):
    return nn.new_head(din, dout, rng).dense


def _dense_step(layer: nn.Dense, grads, lr):
    for p, g in zip(layer.params(), grads):
        p -= lr * g


def run_distillation(student: nn.BlockNet, emb: EmbeddingDataset, x: np.ndarray, cfg: DistillConfig,
                     seed: int, classes: int | None = None) -> nn.BlockNet:
    """Train ``student`` toward the teacher embeddings plus the labels.

    A matching layer (P -> Q) and a temporary classification head on the
    matched features are used during training and discarded afterwards; the
    returned network is the bare student extractor.
    """
    if len(emb) != len(x):
        raise ValueError("embedding dataset and raw inputs differ in length")
    student = student.without_head()
    rng = np.random.default_rng(seed)
    p_dim = nn.readout(np.zeros((1,) + student.feature_shape)).shape[1]
    classes = classes or int(emb.labels.max()) + 1
    match = _dense(rng, p_dim, emb.width)
    head = _dense(rng, emb.width, classes)
    for epoch in range(cfg.epochs):
        for step, idx in enumerate(_batches(len(x), cfg.batch_size, rng)):
            _, acts = nn.forward(student, x[idx])
            feat = nn.readout(acts.features)
            matched = match.forward(feat)
            logits = head.forward(matched)
            m, dp = mse(matched, emb.embeddings[idx], return_grad=True)
            c, dz = cross_entropy(logits, emb.labels[idx], return_grad=True)
            loss = cfg.alpha * m + c
            if not np.isfinite(loss):
                raise TrainingDivergedError("distill", epoch, step, loss)
            d_matched, head_g = head.backward(matched, logits, dz)
            d_feat, match_g = match.backward(feat, matched, d_matched + cfg.alpha * dp)
            tape = nn.backward(student, nn.readout_backward(acts.features, d_feat), acts, wrt="features")
            nn.sgd_step(student, tape, cfg.lr)
            _dense_step(head, head_g, cfg.lr)
            _dense_step(match, match_g, cfg.lr)
        log.debug("distill epoch %d loss %.4f", epoch, loss)
    return student


def joint_train(student: nn.BlockNet, split_index: int, emb: EmbeddingDataset, x: np.ndarray,
                cfg: DistillConfig, seed: int, classes: int | None = None) -> nn.BlockNet:
    """Fine-tune the extractor so both the prefix (part) and whole (full) model
    stay close to the teacher embeddings while classifying the labels."""
    student = student.without_head()
    if not 0 < split_index <= len(student.blocks):
        raise IndexError(f"split index {split_index} out of range")
    rng = np.random.default_rng(seed)
    classes = classes or int(emb.labels.max()) + 1
    part_dim = student.shape_at(split_index)[0]
    full_dim = nn.readout(np.zeros((1,) + student.feature_shape)).shape[1]
    match_p, match_f = _dense(rng, part_dim, emb.width), _dense(rng, full_dim, emb.width)
    head_p, head_f = _dense(rng, emb.width, classes), _dense(rng, emb.width, classes)
    for epoch in range(cfg.epochs):
        for step, idx in enumerate(_batches(len(x), cfg.batch_size, rng)):
            _, acts = nn.forward(student, x[idx])
            boundary = acts.values[split_index]
            fp, ff = nn.readout(boundary), nn.readout(acts.features)
            mp, mf = match_p.forward(fp), match_f.forward(ff)
            zp, zf = head_p.forward(mp), head_f.forward(mf)
            loss, (dmp, dmf, dzp, dzf) = joint_loss(mp, mf, emb.embeddings[idx], zp, zf, emb.labels[idx],
                                                    cfg.alpha, cfg.beta, return_grad=True)
            if not np.isfinite(loss):
                raise TrainingDivergedError("joint-train", epoch, step, loss)
            dmp_h, hp_g = head_p.backward(mp, zp, dzp)
            dmf_h, hf_g = head_f.backward(mf, zf, dzf)
            dfp, mp_g = match_p.backward(fp, mp, dmp + dmp_h)
            dff, mf_g = match_f.backward(ff, mf, dmf + dmf_h)
            extra = {split_index: nn.readout_backward(boundary, dfp)}
            if split_index == len(student.blocks):
                # part and full share the last boundary
                dff = dff + dfp
                extra = {}
            tape = nn.backward(student, nn.readout_backward(acts.features, dff), acts,
                               wrt="features", boundary_grads=extra)
            nn.sgd_step(student, tape, cfg.lr)
            for layer, g in ((head_p, hp_g), (head_f, hf_g), (match_p, mp_g), (match_f, mf_g)):
                _dense_step(layer, g, cfg.lr)
        log.debug("joint-train epoch %d loss %.4f", epoch, loss)
    return student
