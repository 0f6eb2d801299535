"""Mini-batch softmax-regression heads used as linear probes and as the
large-batch reference trainer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import cross_entropy
from .nn import softmax


@dataclass
class LinearProbe:
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None

    def _prep(self, feats):
        feats = np.asarray(feats, dtype=float)
        if self.mean is not None:
            feats = (feats - self.mean) / self.scale
        return feats

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return self._prep(feats) @ self.weight + self.bias

    def predict_proba(self, feats):
        return softmax(self.logits(feats))

    def predict(self, feats):
        return self.logits(feats).argmax(axis=1)

    def accuracy(self, feats, labels) -> float:
        return float((self.predict(feats) == np.asarray(labels)).mean())


def fit_probe(feats: np.ndarray, labels: np.ndarray, classes: int, *, epochs: int = 30, lr: float = 0.1,
              batch_size: int = 128, seed: int = 0, standardize: bool = True, shuffle: bool = True) -> LinearProbe:
    """Train a softmax-regression head with plain mini-batch SGD (mean-reduced loss)."""
    feats = np.asarray(feats, dtype=float)
    labels = np.asarray(labels, dtype=int)
    rng = np.random.default_rng(seed)
    mean = scale = None
    if standardize:
        mean = feats.mean(axis=0)
        scale = feats.std(axis=0) + 1e-8
    probe = LinearProbe(np.zeros((feats.shape[1], classes)), np.zeros(classes), mean, scale)
    x = probe._prep(feats)
    n = len(x)
    for _ in range(epochs):
        order = rng.permutation(n) if shuffle else np.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, dz = cross_entropy(x[idx] @ probe.weight + probe.bias, labels[idx], return_grad=True)
            probe.weight -= lr * (x[idx].T @ dz)
            probe.bias -= lr * dz.sum(axis=0)
    return probe
