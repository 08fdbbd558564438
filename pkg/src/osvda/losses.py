"""Training objectives.

Each contrastive loss has two entry points: ``loss_*`` returns the scalar,
``loss_*_with_grad`` returns the scalar plus gradients with respect to every
embedding argument. The heavy lifting happens in :mod:`osvda.kernels`.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import kernels

# zero_norm: cosine similarity evaluated on a zero vector (result taken as 0)
# empty_cross: cross-domain loss called with no accepted target anchors
diagnostics: Counter = Counter()


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.1
    alpha: float = 1.0
    lam: float = 0.1

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        diagnostics["zero_norm"] += 1
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _rows(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array of row vectors, got shape {x.shape}")
    return x


def _count_zero_rows(*arrays):
    for a in arrays:
        n = int(np.count_nonzero(~a.any(axis=1)))
        if n:
            diagnostics["zero_norm"] += n


def loss_sup_with_grad(z_views, labels, tau):
    """Label-based contrastive loss over all views of a source batch.

    ``z_views`` holds every view (2b rows for b samples); positives of an
    anchor are the other rows sharing its label, the denominator runs over
    all other rows. Anchors without a positive are skipped.
    """
    z = _rows(z_views, "z_views")
    y = np.asarray(labels)
    n = z.shape[0]
    if n < 2:
        raise ValueError("label-based contrastive loss needs at least 2 views")
    if y.shape != (n,):
        raise ValueError("labels must have one entry per view")
    _count_zero_rows(z)
    off_diag = 1.0 - np.eye(n)
    pos = (y[:, None] == y[None, :]) * off_diag
    loss, ga, gb, _ = kernels.masked_contrastive(z, z, pos, off_diag, tau)
    return loss, ga + gb


def loss_sup(z_views, labels, tau) -> float:
    return loss_sup_with_grad(z_views, labels, tau)[0]


def loss_aug_with_grad(z, z_tilde, tau):
    """Symmetrised NT-Xent over two views of b samples.

    Rows of ``z`` and ``z_tilde`` are paired. Every one of the 2b views is an
    anchor whose positive is its partner view; the result averages all 2b
    anchors, which equals averaging the loss with the views swapped.
    """
    z = _rows(z, "z")
    zt = _rows(z_tilde, "z_tilde")
    if z.shape != zt.shape:
        raise ValueError("z and z_tilde must have the same shape")
    b = z.shape[0]
    if b < 1:
        raise ValueError("need at least one sample")
    allz = np.concatenate([z, zt])
    _count_zero_rows(allz)
    n = 2 * b
    idx = np.arange(n)
    pos = np.zeros((n, n))
    pos[idx, (idx + b) % n] = 1.0
    den = 1.0 - np.eye(n)
    loss, ga, gb, _ = kernels.masked_contrastive(allz, allz, pos, den, tau)
    g = ga + gb
    return loss, g[:b], g[b:]


def loss_aug(z, z_tilde, tau) -> float:
    return loss_aug_with_grad(z, z_tilde, tau)[0]


def loss_temp_with_grad(h, h_tilde, h_minus, alpha):
    """Triplet hinge on Euclidean distances, averaged over rows.

    Accepts single vectors or (n, F) batches.
    """
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    h2 = np.atleast_2d(h)
    hp = np.atleast_2d(np.asarray(h_tilde, dtype=np.float64))
    hn = np.atleast_2d(np.asarray(h_minus, dtype=np.float64))
    if not (h2.shape == hp.shape == hn.shape):
        raise ValueError("anchor, positive and negative must have the same shape")
    loss, gh, gp, gn = kernels.triplet(h2, hp, hn, alpha)
    if single:
        return loss, gh[0], gp[0], gn[0]
    return loss, gh, gp, gn


def loss_temp(h, h_tilde, h_minus, alpha) -> float:
    return loss_temp_with_grad(h, h_tilde, h_minus, alpha)[0]


def loss_cross_with_grad(z_target, pseudo_labels, z_source, source_labels, tau):
    """Cross-domain contrastive loss for accepted target anchors.

    Each target anchor is contrasted only against source views: positives
    are source views whose label equals the anchor's pseudo-label, the
    denominator is all source views. Anchors whose pseudo-class is absent
    from the source batch are skipped. An empty anchor set yields 0.
    """
    zs = _rows(z_source, "z_source")
    ys = np.asarray(source_labels)
    zt = np.asarray(z_target, dtype=np.float64).reshape(-1, zs.shape[1])
    yt = np.asarray(pseudo_labels).reshape(-1)
    if zt.shape[0] != yt.shape[0]:
        raise ValueError("one pseudo-label per target anchor required")
    if ys.shape != (zs.shape[0],):
        raise ValueError("one label per source view required")
    if zt.shape[0] == 0:
        diagnostics["empty_cross"] += 1
        return 0.0, np.zeros_like(zt), np.zeros_like(zs)
    _count_zero_rows(zt, zs)
    pos = (yt[:, None] == ys[None, :]).astype(np.float64)
    den = np.ones_like(pos)
    loss, gt, gs, _ = kernels.masked_contrastive(zt, zs, pos, den, tau)
    return loss, gt, gs


def loss_cross(z_target, pseudo_labels, z_source, source_labels, tau) -> float:
    return loss_cross_with_grad(z_target, pseudo_labels, z_source, source_labels, tau)[0]


def loss_open_with_grad(logits, labels):
    """Mean per-row cross-entropy. With K+1 outputs, source rows carry their
    class and rejected target rows carry index K."""
    z = _rows(logits, "logits")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != z.shape[0]:
        raise ValueError("one label per row required")
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        bad = int(y[(y < 0) | (y >= z.shape[1])][0])
        raise ValueError(f"label {bad} out of range for {z.shape[1]} classes")
    return kernels.softmax_xent(z, y)


def loss_open(logits, labels) -> float:
    return loss_open_with_grad(logits, labels)[0]


# the closed-set stage-1 classification loss is the same computation on K logits
loss_ce_with_grad = loss_open_with_grad
loss_ce = loss_open

_UNWEIGHTED = ("ce", "open", "sup", "aug", "cross")


def total_loss(parts: dict, lam: float) -> float:
    """Sum of every part with ``temp`` weighted by ``lam``.

    Recognised keys: ``ce`` or ``open``, ``sup``, ``aug``, ``cross``, ``temp``.
    Missing keys contribute nothing.
    """
    total = 0.0
    for name, value in parts.items():
        if name not in _UNWEIGHTED and name != "temp":
            raise KeyError(f"unknown loss part {name!r}")
        if not math.isfinite(value):
            raise FloatingPointError(f"loss part {name!r} is not finite: {value}")
        total += lam * value if name == "temp" else value
    return total
