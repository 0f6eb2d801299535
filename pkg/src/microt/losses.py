"""Training objectives and their analytic gradients.

All losses accept either a single sample (1-D arrays, scalar label) or a batch
(2-D arrays, label vector); batch losses are the mean of per-sample losses and
gradients are scaled accordingly.
"""
from __future__ import annotations

import numpy as np

from .nn import ShapeError, log_softmax, softmax


def _batch(*arrays):
    single = np.ndim(arrays[0]) == 1
    out = [np.atleast_2d(np.asarray(a, dtype=float)) for a in arrays]
    return single, out


def _unbatch(single, grads):
    return [g[0] for g in grads] if single else grads


def cross_entropy(logits, labels, return_grad: bool = False):
    """Softmax cross-entropy ``-log softmax(logits)[label]``."""
    single, (z,) = _batch(logits)
    y = np.atleast_1d(np.asarray(labels, dtype=int))
    if len(y) != len(z):
        raise ShapeError("cross_entropy labels", (len(z),), y.shape)
    if np.any((y < 0) | (y >= z.shape[1])):
        raise ValueError("label out of range")
    n = len(z)
    logp = log_softmax(z)
    loss = -logp[np.arange(n), y].mean()
    if not return_grad:
        return float(loss)
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    return float(loss), _unbatch(single, [g / n])[0]


def mse(p, q, return_grad: bool = False):
    single, (p, q) = _batch(p, q)
    if p.shape != q.shape:
        raise ShapeError("mse", q.shape, p.shape)
    d = p - q
    loss = float((d**2).mean(axis=1).mean())
    if not return_grad:
        return loss
    return loss, _unbatch(single, [2.0 * d / d.size])[0]


def ssl_loss(guide_logits, explore_logits, tau_guide: float = 0.04, tau_explore: float = 0.1,
             return_grad: bool = False):
    """Cross-entropy of the exploration distribution against the guide's.

    The guide side is a constant target; the returned gradient (when requested)
    is with respect to ``explore_logits`` only.
    """
    if tau_guide <= 0 or tau_explore <= 0:
        raise ValueError("temperatures must be positive")
    single, (g, e) = _batch(guide_logits, explore_logits)
    if g.shape != e.shape:
        raise ShapeError("ssl_loss", g.shape, e.shape)
    if g.shape[1] == 0:
        raise ValueError("ssl_loss on zero-length logits")
    target = softmax(g, tau_guide)
    loss = float(-(target * log_softmax(e, tau_explore)).sum(axis=1).mean())
    if not return_grad:
        return loss
    grad = (softmax(e, tau_explore) - target) / (tau_explore * len(g))
    return loss, _unbatch(single, [grad])[0]


def distill_loss(student_feat, teacher_feat, student_out, label, alpha: float = 1.0,
                 return_grad: bool = False):
    """``alpha * MSE(student_feat, teacher_feat) + CE(student_out, label)``.

    ``student_feat`` must already be mapped to the teacher width by the
    matching layer; ``student_out`` are logits. With ``return_grad`` the
    gradients w.r.t. ``(student_feat, student_out)`` are returned as well.
    """
    if not alpha >= 0 or not np.isfinite(alpha):
        raise ValueError("alpha must be finite and nonnegative")
    if np.shape(student_feat) != np.shape(teacher_feat):
        raise ShapeError("distill_loss features", np.shape(teacher_feat), np.shape(student_feat))
    if not return_grad:
        return alpha * mse(student_feat, teacher_feat) + cross_entropy(student_out, label)
    m, dp = mse(student_feat, teacher_feat, return_grad=True)
    c, dz = cross_entropy(student_out, label, return_grad=True)
    return alpha * m + c, (alpha * dp, dz)


def joint_loss(part_feat, full_feat, teacher_feat, part_out, full_out, label,
               alpha: float = 1.0, beta: float = 1.0, return_grad: bool = False):
    """Joint objective for the part and full models.

    ``alpha * MSE(full_feat, q) + beta * MSE(part_feat, q) + CE(full_out) + CE(part_out)``;
    gradients come back in the order ``(part_feat, full_feat, part_out, full_out)``.
    """
    for w in (alpha, beta):
        if not w >= 0 or not np.isfinite(w):
            raise ValueError("alpha and beta must be finite and nonnegative")
    for name, f in (("part", part_feat), ("full", full_feat)):
        if np.shape(f) != np.shape(teacher_feat):
            raise ShapeError(f"joint_loss {name} features", np.shape(teacher_feat), np.shape(f))
    mf, dpf = mse(full_feat, teacher_feat, return_grad=True)
    mp, dpp = mse(part_feat, teacher_feat, return_grad=True)
    cf, dzf = cross_entropy(full_out, label, return_grad=True)
    cp, dzp = cross_entropy(part_out, label, return_grad=True)
    loss = alpha * mf + beta * mp + cf + cp
    if not return_grad:
        return loss
    return loss, (beta * dpp, alpha * dpf, dzp, dzf)
