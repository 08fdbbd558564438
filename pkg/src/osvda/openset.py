"""Unknown-class rejection and pseudo-labelling of target samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .network import ModelParams, aggregate_batch, classify, softmax

PROTOTYPE = "prototype"
ENTROPY = "entropy"
REJECTION_MODES = (PROTOTYPE, ENTROPY)


class EmptyClassError(ValueError):
    pass


@dataclass(frozen=True)
class Prototypes:
    mu: np.ndarray  # (K, F)
    counts: np.ndarray  # (K,)

    @property
    def K(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class RejectionDecision:
    s: np.ndarray  # 1 = treated as unknown
    best_class: np.ndarray
    best_sim: np.ndarray  # max cosine similarity, or entropy in entropy mode

    def __len__(self):
        return len(self.s)


def prototypes_from_features(h, labels, K) -> Prototypes:
    h = np.asarray(h, dtype=np.float64)
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=K)[:K]
    for k in range(K):
        if counts[k] == 0:
            raise EmptyClassError(f"class {k} has no source samples")
    mu = np.zeros((K, h.shape[1]))
    np.add.at(mu, labels, h)
    return Prototypes(mu / counts[:, None], counts)


def compute_prototypes(params: ModelParams, source: Dataset) -> Prototypes:
    """Mean un-augmented video feature of every source class."""
    h = aggregate_batch(params, source.features())
    return prototypes_from_features(h, source.source_labels(), params.dims.K)


def _unit_rows(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def prototype_similarity(h, prototypes: Prototypes) -> np.ndarray:
    """Cosine similarity of every row of ``h`` to every prototype, (n, K)."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    return np.clip(_unit_rows(h) @ _unit_rows(prototypes.mu).T, -1.0, 1.0)


def reject_unknown(h, prototypes: Prototypes, gamma: float) -> RejectionDecision:
    """``s = 1`` iff the nearest prototype has cosine similarity <= gamma.

    ``h`` may be one feature vector or a batch of rows.
    """
    if not -1.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [-1, 1], got {gamma}")
    sims = prototype_similarity(h, prototypes)
    best = sims.argmax(axis=1)
    best_sim = sims[np.arange(len(best)), best]
    return RejectionDecision((best_sim <= gamma).astype(np.int64), best, best_sim)


def entropy(logits) -> np.ndarray:
    """Shannon entropy (nats) of softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return -(np.exp(logp) * logp).sum(axis=-1)


def reject_unknown_entropy(params: ModelParams, h, threshold: float) -> RejectionDecision:
    """Entropy variant: ``s = 1`` iff the closed-set classifier's softmax
    entropy is at least ``threshold``. ``best_sim`` carries the entropy."""
    if threshold < 0:
        raise ValueError("entropy threshold must be >= 0")
    logits = np.atleast_2d(classify(params, h))
    ent = entropy(logits)
    return RejectionDecision((ent >= threshold).astype(np.int64), logits.argmax(axis=1), ent)


def pseudo_label(params: ModelParams, h) -> np.ndarray | int:
    """Closed-set argmax of C; ``np.argmax`` already breaks ties low."""
    logits = classify(params, h)
    if logits.ndim == 1:
        return int(np.argmax(logits))
    return logits.argmax(axis=1)


def reject(params, h, mode, gamma, entropy_threshold, prototypes=None) -> RejectionDecision:
    if mode == PROTOTYPE:
        if prototypes is None:
            raise ValueError("prototype rejection needs prototypes")
        return reject_unknown(h, prototypes, gamma)
    if mode == ENTROPY:
        return reject_unknown_entropy(params, h, entropy_threshold)
    raise ValueError(f"unknown rejection mode {mode!r}")


def open_set_pseudo_labels(params, h, mode, gamma, entropy_threshold, prototypes=None):
    """Labels in [0, K]: K for rejected rows, C's argmax otherwise.

    Returns ``(labels, decision)``.
    """
    h = np.atleast_2d(h)
    dec = reject(params, h, mode, gamma, entropy_threshold, prototypes)
    labels = np.where(dec.s == 1, params.dims.K, pseudo_label(params, h))
    return labels, dec
