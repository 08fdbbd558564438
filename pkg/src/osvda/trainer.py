"""Two-stage training with momentum SGD.

Stage one learns the representation from source labels (cross-entropy on C
plus label-based contrastive), target views (augmentation contrastive) and
clip order (temporal triplet). Stage two adds prototype or entropy based
rejection, pseudo-labels from C, the cross-domain contrastive term and the
(K+1)-way classifier C'.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses
from .data import Batch, Dataset, make_batches
from .metrics import pseudo_label_report
from .network import (
    ModelDims,
    ModelParams,
    Tape,
    aggregate,
    aggregate_batch,
    classify_open,
    init_params,
    warm_start_open_classifier,
)
from .openset import PROTOTYPE, REJECTION_MODES, compute_prototypes, pseudo_label, reject

logger = logging.getLogger(__name__)

STAGE_ONE = "one"
STAGE_TWO = "two"


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 30
    stage2_epochs: int = 30
    lr: float = 0.01
    momentum: float = 0.9
    b: int = 16
    tau: float = 0.1
    alpha: float = 1.0
    lam: float = 0.1
    gamma: float = 0.7
    aug_strength: float = 0.05
    seed: int = 0
    rejection_mode: str = PROTOTYPE
    # entropy mode threshold in nats; None means half of ln K
    entropy_threshold: float | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.b < 2:
            raise ValueError("batch size must be >= 2")
        if self.rejection_mode not in REJECTION_MODES:
            raise ValueError(f"rejection_mode must be one of {REJECTION_MODES}")
        if not -1 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [-1, 1]")
        if self.aug_strength < 0:
            raise ValueError("aug_strength must be >= 0")
        losses.ContrastiveConfig(self.tau, self.alpha, self.lam)

    def entropy_threshold_for(self, K: int) -> float:
        if self.entropy_threshold is None:
            return 0.5 * math.log(K)
        return self.entropy_threshold


@dataclass
class TrainState:
    params: ModelParams
    velocity: ModelParams
    epoch: int = 0
    stage: str = STAGE_ONE
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, dims: ModelDims, seed: int) -> "TrainState":
        params = init_params(dims, seed)
        return cls(params, ModelParams.zeros_like(params))

    def copy(self) -> "TrainState":
        return TrainState(
            self.params.copy(), self.velocity.copy(), self.epoch, self.stage, [dict(h) for h in self.history]
        )

    def history_json(self) -> str:
        return json.dumps(self.history, indent=1) + "\n"


def sgd_step(state: TrainState, grads: ModelParams, lr: float, momentum: float) -> TrainState:
    """Heavy-ball update in place: v <- m v + g; p <- p - lr v."""
    for name, g in grads.arrays.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.arrays.items():
        v = state.velocity.arrays[name]
        v *= momentum
        v += g
        state.params.arrays[name] -= lr * v
    return state


def _temporal_rows(b):
    # row layout of the aggregator input: src v1, src v2, tgt v1, tgt v2, src shuffled, tgt shuffled
    anchors = np.r_[0:b, 2 * b : 3 * b]
    positives = np.r_[b : 2 * b, 3 * b : 4 * b]
    negatives = np.r_[4 * b : 6 * b]
    return anchors, positives, negatives


@dataclass
class StepResult:
    parts: dict
    total: float
    grads: ModelParams
    rejected: int = 0
    accepted: int = 0
    min_relu_margin: float = math.inf


def batch_objective(
    params: ModelParams,
    batch: Batch,
    config: TrainConfig,
    stage: str,
    prototypes=None,
    decision=None,
    pseudo=None,
    terms=None,
) -> StepResult:
    """Loss parts and parameter gradients for one batch.

    In stage two the rejection ``decision`` and ``pseudo`` labels are
    computed from the current parameters unless supplied. ``terms`` restricts
    the objective to a subset of part names (used by gradient checks).
    """
    K = params.dims.K
    b = batch.b
    tape = Tape(params)
    x = np.concatenate(
        [
            batch.source_views[0],
            batch.source_views[1],
            batch.target_views[0],
            batch.target_views[1],
            batch.source_shuffled,
            batch.target_shuffled,
        ]
    )
    h = tape.aggregate(x)
    z = tape.project(h[0 : 4 * b])
    ys = np.concatenate([batch.source_labels, batch.source_labels])
    want = (lambda name: True) if terms is None else (lambda name: name in terms)
    parts = {}
    weight = {"temp": config.lam}

    def seed(node, rows, grad, name):
        node.grad[rows] += weight.get(name, 1.0) * grad

    n_rej = n_acc = 0
    if stage == STAGE_ONE:
        if want("ce"):
            logits = tape.classify(h[0 : 2 * b])
            parts["ce"], g = losses.loss_ce_with_grad(logits.value, ys)
            logits.grad += g
    else:
        if decision is None or pseudo is None:
            h_clean = aggregate_batch(params, batch.target_clean)
            if decision is None:
                decision = reject(
                    params, h_clean, config.rejection_mode, config.gamma,
                    config.entropy_threshold_for(K), prototypes,
                )
            if pseudo is None:
                pseudo = pseudo_label(params, np.atleast_2d(h_clean))
        rej = np.flatnonzero(decision.s == 1)
        acc = np.flatnonzero(decision.s == 0)
        n_rej, n_acc = len(rej), len(acc)
        if want("open"):
            rows = np.r_[0 : 2 * b, 2 * b + rej, 3 * b + rej]
            logits = tape.classify_open(h[rows])
            labels = np.concatenate([ys, np.full(2 * n_rej, K)])
            parts["open"], g = losses.loss_open_with_grad(logits.value, labels)
            logits.grad += g
        if want("cross"):
            zv = z.value
            parts["cross"], gt, gs = losses.loss_cross_with_grad(
                zv[2 * b + acc], np.asarray(pseudo)[acc], zv[0 : 2 * b], ys, config.tau
            )
            seed(z, 2 * b + acc, gt, "cross")
            seed(z, slice(0, 2 * b), gs, "cross")

    zv = z.value
    if want("sup"):
        parts["sup"], g = losses.loss_sup_with_grad(zv[0 : 2 * b], ys, config.tau)
        seed(z, slice(0, 2 * b), g, "sup")
    if want("aug"):
        parts["aug"], g1, g2 = losses.loss_aug_with_grad(zv[2 * b : 3 * b], zv[3 * b : 4 * b], config.tau)
        seed(z, slice(2 * b, 3 * b), g1, "aug")
        seed(z, slice(3 * b, 4 * b), g2, "aug")
    if want("temp"):
        anc, pos, neg = _temporal_rows(b)
        hv = h.value
        parts["temp"], ga, gp, gn = losses.loss_temp_with_grad(hv[anc], hv[pos], hv[neg], config.alpha)
        seed(h, anc, ga, "temp")
        seed(h, pos, gp, "temp")
        seed(h, neg, gn, "temp")

    total = losses.total_loss(parts, config.lam)
    grads = tape.backward()
    return StepResult(parts, total, grads, n_rej, n_acc, tape.min_relu_margin)


def _run_epoch(state, source, target, config, stage, prototypes=None):
    batches = make_batches(
        source, target, config.b, config.seed, epoch=state.epoch, aug_strength=config.aug_strength
    )
    sums: dict = {}
    n_rej = n_seen = 0
    for batch in batches:
        res = batch_objective(state.params, batch, config, stage, prototypes=prototypes)
        sgd_step(state, res.grads, config.lr, config.momentum)
        for k, v in res.parts.items():
            sums[k] = sums.get(k, 0.0) + v
        sums["total"] = sums.get("total", 0.0) + res.total
        n_rej += res.rejected
        n_seen += res.rejected + res.accepted
    record = {"stage": stage, "epoch": state.epoch}
    for k, v in sums.items():
        mean = v / len(batches)
        if not math.isfinite(mean):
            raise FloatingPointError(f"epoch {state.epoch}: loss {k!r} is not finite")
        record[k] = mean
    if stage == STAGE_TWO:
        record["rejection_rate"] = n_rej / n_seen if n_seen else 0.0
    state.epoch += 1
    return record


def train_stage1(source: Dataset, target: Dataset, config: TrainConfig, state: TrainState) -> TrainState:
    state.stage = STAGE_ONE
    for _ in range(config.stage1_epochs):
        record = _run_epoch(state, source, target, config, STAGE_ONE)
        state.history.append(record)
        logger.info("stage 1 epoch %d: %s", record["epoch"], record)
    return state


def _pseudo_accuracy(params, source, target, config, prototypes):
    rep = pseudo_label_report(
        params, target, config.gamma, config.rejection_mode,
        prototypes=prototypes, source=source,
        entropy_threshold=config.entropy_threshold_for(params.dims.K),
    )
    return rep.all_acc


def train_stage2(
    source: Dataset,
    target: Dataset,
    config: TrainConfig,
    state: TrainState,
    monitor: bool = True,
    monitor_target: Dataset | None = None,
) -> TrainState:
    """Alignment stage.

    With ``monitor`` the pseudo-label ALL accuracy is recorded per epoch,
    scored by the evaluation module against the ground truth held in
    ``monitor_target`` (default: ``target``). Batches and gradients never
    touch target labels.
    """
    state.stage = STAGE_TWO
    if config.stage2_epochs == 0:
        return state
    scored = monitor_target if monitor_target is not None else target
    warm_start_open_classifier(state.params)
    state.velocity = ModelParams.zeros_like(state.params)
    for _ in range(config.stage2_epochs):
        protos = compute_prototypes(state.params, source) if config.rejection_mode == PROTOTYPE else None
        start_acc = _pseudo_accuracy(state.params, source, scored, config, protos) if monitor else None
        record = _run_epoch(state, source, target, config, STAGE_TWO, prototypes=protos)
        if monitor:
            record["pseudo_all_acc_start"] = start_acc
            record["pseudo_all_acc"] = _pseudo_accuracy(state.params, source, scored, config, None)
        state.history.append(record)
        logger.info("stage 2 epoch %d: %s", record["epoch"], record)
    return state


def train(
    source: Dataset,
    target: Dataset,
    config: TrainConfig,
    dims: ModelDims,
    monitor: bool = True,
    monitor_target: Dataset | None = None,
) -> TrainState:
    if (dims.c, dims.D, dims.K) != (source.clips_per_video, source.clip_dim, source.K):
        raise ValueError("model dims do not match the dataset (c, D, K)")
    state = TrainState.fresh(dims, config.seed)
    train_stage1(source, target, config, state)
    train_stage2(source, target, config, state, monitor=monitor, monitor_target=monitor_target)
    return state


def infer(params: ModelParams, sample) -> int:
    """Open-set prediction; index K means unknown."""
    return int(np.argmax(classify_open(params, aggregate(params, sample))))
