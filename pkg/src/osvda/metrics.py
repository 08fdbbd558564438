"""Open-set evaluation: ALL, OS*, UNK and HOS over K + 1 classes."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, ground_truth
from .network import ModelParams, aggregate_batch, classify_open
from .openset import PROTOTYPE, compute_prototypes, open_set_pseudo_labels

# missing_shared_class: a shared class with no target samples was left out of OS*
warnings_counter: Counter = Counter()


def hos(os_star: float, unk: float) -> float:
    """Harmonic mean of known-class and unknown accuracy (0 if both are 0)."""
    denom = os_star + unk
    if denom == 0:
        return 0.0
    # sorted operands and ratio-first: exactly symmetric, hos(a, a) == a,
    # and no underflow for tiny inputs
    lo, hi = sorted((os_star, unk))
    return 2.0 * lo * (hi / denom)


@dataclass
class MetricsReport:
    all_acc: float
    os_star: float
    unk: float
    hos: float
    per_class_acc: list
    confusion: list
    pseudo_all_acc: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        extra = d.pop("extra")
        d.update(extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def target_ground_truth(target: Dataset) -> np.ndarray:
    labels = [ground_truth(s) for s in target]
    if any(y is None for y in labels):
        raise ValueError("target dataset has no ground-truth labels")
    return np.array(labels, dtype=np.int64)


def report_from_predictions(pred, truth, K) -> MetricsReport:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    conf = np.zeros((K + 1, K + 1), dtype=np.int64)
    np.add.at(conf, (truth, pred), 1)
    support = conf.sum(axis=1)
    recall = np.divide(np.diag(conf), support, out=np.full(K + 1, np.nan), where=support > 0)
    known = recall[:K]
    present = ~np.isnan(known)
    missing = int(K - present.sum())
    if missing:
        warnings_counter["missing_shared_class"] += missing
    os_star = float(known[present].mean()) if present.any() else 0.0
    unk = float(recall[K]) if support[K] > 0 else 0.0
    total = conf.sum()
    all_acc = float(np.trace(conf) / total) if total else 0.0
    return MetricsReport(
        all_acc=all_acc,
        os_star=os_star,
        unk=unk,
        hos=hos(os_star, unk),
        per_class_acc=[None if np.isnan(r) else float(r) for r in recall],
        confusion=conf.tolist(),
    )


def predict(params: ModelParams, x) -> np.ndarray:
    """Open-set predictions in [0, K] for clip stacks ``x`` (n, c, D)."""
    return classify_open(params, aggregate_batch(params, x)).argmax(axis=1)


def evaluate(params: ModelParams, target: Dataset) -> MetricsReport:
    pred = predict(params, target.features())
    return report_from_predictions(pred, target_ground_truth(target), params.dims.K)


def pseudo_label_report(
    params: ModelParams,
    target: Dataset,
    gamma: float,
    rejection_mode: str = PROTOTYPE,
    prototypes=None,
    source: Dataset | None = None,
    entropy_threshold: float | None = None,
) -> MetricsReport:
    """Metrics of the training-time pseudo-labels (K for rejected samples).

    Prototype mode needs ``prototypes`` or a ``source`` to build them from.
    """
    if rejection_mode == PROTOTYPE and prototypes is None:
        if source is None:
            raise ValueError("prototype mode needs prototypes or a source dataset")
        prototypes = compute_prototypes(params, source)
    if entropy_threshold is None:
        entropy_threshold = gamma
    h = aggregate_batch(params, target.features())
    labels, dec = open_set_pseudo_labels(params, h, rejection_mode, gamma, entropy_threshold, prototypes)
    rep = report_from_predictions(labels, target_ground_truth(target), params.dims.K)
    rep.pseudo_all_acc = rep.all_acc
    rep.extra["rejection_rate"] = float(dec.s.mean()) if len(dec) else 0.0
    return rep


def pseudo_label_all_accuracy(params, target, gamma, rejection_mode=PROTOTYPE, **kw) -> float:
    return pseudo_label_report(params, target, gamma, rejection_mode, **kw).all_acc
