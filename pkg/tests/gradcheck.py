"""Finite-difference checks of every training objective.

Each case draws a small random instance, evaluates the analytic gradient and
compares it with central differences. Errors are relative in the norm sense,
``|a - n| / max(|a| + |n|, tiny)``, so near-zero components don't dominate.
"""
from __future__ import annotations

import numpy as np

from microt import losses
from oracles import numeric_grad


def _rel(a, n) -> float:
    a, n = np.ravel(a), np.ravel(n)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12))


def check_cross_entropy(rng) -> float:
    n, c = rng.integers(1, 5), rng.integers(2, 7)
    z = rng.normal(size=(n, c)) * 2
    y = rng.integers(0, c, size=n)
    _, g = losses.cross_entropy(z, y, return_grad=True)
    return _rel(g, numeric_grad(lambda v: losses.cross_entropy(v, y), z))


def check_ssl(rng) -> float:
    n, d = rng.integers(1, 5), rng.integers(2, 9)
    tg, te = rng.uniform(0.04, 0.5), rng.uniform(0.1, 1.0)
    g = rng.normal(size=(n, d))
    e = rng.normal(size=(n, d)) * 0.3
    _, grad = losses.ssl_loss(g, e, tg, te, return_grad=True)
    return _rel(grad, numeric_grad(lambda v: losses.ssl_loss(g, v, tg, te), e))


def check_distill(rng) -> float:
    n, q, c = rng.integers(1, 4), rng.integers(2, 8), rng.integers(2, 6)
    alpha = rng.uniform(0, 3)
    p, t = rng.normal(size=(n, q)), rng.normal(size=(n, q))
    z, y = rng.normal(size=(n, c)), rng.integers(0, c, size=n)
    _, (dp, dz) = losses.distill_loss(p, t, z, y, alpha, return_grad=True)
    worst = _rel(dp, numeric_grad(lambda v: losses.distill_loss(v, t, z, y, alpha), p))
    return max(worst, _rel(dz, numeric_grad(lambda v: losses.distill_loss(p, t, v, y, alpha), z)))


def check_joint(rng) -> float:
    n, q, c = rng.integers(1, 4), rng.integers(2, 8), rng.integers(2, 6)
    alpha, beta = rng.uniform(0, 3), rng.uniform(0, 3)
    pf, ff, t = (rng.normal(size=(n, q)) for _ in range(3))
    pz, fz = rng.normal(size=(n, c)), rng.normal(size=(n, c))
    y = rng.integers(0, c, size=n)
    args = [pf, ff, t, pz, fz]
    _, grads = losses.joint_loss(*args, y, alpha, beta, return_grad=True)
    worst = 0.0
    for slot, g in zip((0, 1, 3, 4), grads):
        def f(v, slot=slot):
            a = list(args)
            a[slot] = v
            return losses.joint_loss(*a, y, alpha, beta)
        worst = max(worst, _rel(g, numeric_grad(f, args[slot])))
    return worst


CHECKS = {
    "softmax cross-entropy": check_cross_entropy,
    "ssl guide/explore cross-entropy": check_ssl,
    "distillation loss": check_distill,
    "joint part/full loss": check_joint,
}


def run_suite(instances: int = 100, seed: int = 0) -> dict[str, float]:
    """Worst relative error per objective over ``instances`` random cases each."""
    rng = np.random.default_rng(seed)
    return {name: max(check(rng) for _ in range(instances)) for name, check in CHECKS.items()}
