"""Central finite-difference verification of every training objective.

Each check draws small random parameters and a random batch, fixes the
discrete choices (rejection flags, pseudo-labels), and compares the tape
gradient of one objective against central differences over the full flat
parameter vector.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import Batch
from .network import ModelDims, ModelParams, aggregate_batch, init_params
from .openset import RejectionDecision
from .trainer import STAGE_ONE, STAGE_TWO, TrainConfig, batch_objective

# objective name -> (stage, terms); None means every term of that stage
OBJECTIVES = {
    "sup": (STAGE_ONE, {"sup"}),
    "aug": (STAGE_ONE, {"aug"}),
    "temp": (STAGE_ONE, {"temp"}),
    "cross": (STAGE_TWO, {"cross"}),
    "open": (STAGE_TWO, {"open"}),
    "stage1_total": (STAGE_ONE, None),
    "total": (STAGE_TWO, None),
}

SMALL_DIMS = ModelDims(D=3, c=3, H=5, F=4, P=3, K=3)
KINK_MARGIN = 1e-3


def central_difference(f, x, eps=1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic, numeric, floor=1e-6) -> np.ndarray:
    """Per-coordinate |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def coordinate_name(dims: ModelDims, index: int) -> str:
    off = 0
    for name, shape in dims.shapes().items():
        size = int(np.prod(shape))
        if index < off + size:
            return f"{name}{[int(i) for i in np.unravel_index(index - off, shape)]}"
        off += size
    raise IndexError(index)


def random_batch(dims: ModelDims, b: int, rng: np.random.Generator) -> Batch:
    shape = (dims.c, dims.D)
    sv = rng.standard_normal((2, b) + shape)
    tv = rng.standard_normal((2, b) + shape)
    perm = np.roll(np.arange(dims.c), 1)
    labels = np.arange(b) % dims.K
    rng.shuffle(labels)
    return Batch(
        source_views=sv,
        source_labels=labels,
        source_shuffled=sv[0][:, perm],
        target_views=tv,
        target_shuffled=tv[0][:, perm],
        target_clean=tv[0].copy(),
    )


def random_decision(b: int, K: int, rng: np.random.Generator):
    # at least one accepted and one rejected target
    s = np.zeros(b, dtype=np.int64)
    s[rng.permutation(b)[: max(1, b // 2)]] = 1
    pseudo = rng.integers(0, K, size=b)
    return RejectionDecision(s, pseudo, np.zeros(b)), pseudo


def _temporal_margins(params, batch, alpha):
    x = np.concatenate([batch.source_views[0], batch.target_views[0]])
    h = aggregate_batch(params, x)
    hp = aggregate_batch(params, np.concatenate([batch.source_views[1], batch.target_views[1]]))
    hn = aggregate_batch(params, np.concatenate([batch.source_shuffled, batch.target_shuffled]))
    dp = np.linalg.norm(h - hp, axis=1)
    dn = np.linalg.norm(h - hn, axis=1)
    return dp - dn + alpha, dp, dn


@dataclass
class CheckResult:
    name: str
    configs: int
    max_rel_err: float
    worst_coordinate: str
    seconds: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def to_dict(self):
        return {
            "loss": self.name,
            "configs": self.configs,
            "max_rel_err": self.max_rel_err,
            "worst_coordinate": self.worst_coordinate,
            "seconds": round(self.seconds, 3),
            "passed": self.passed,
        }


def draw_configuration(name, seed, dims=SMALL_DIMS, b=4, tau=0.5, alpha=None):
    """Random (params, batch, fixed discrete choices) away from ReLU and
    hinge kinks. Redraws deterministically until the configuration is safe."""
    stage, terms = OBJECTIVES[name]
    attempt = 0
    while True:
        rng = np.random.default_rng([seed, attempt])
        attempt += 1
        params = init_params(dims, int(rng.integers(2**31)))
        for arr in params.arrays.values():
            arr += 0.1 * rng.standard_normal(arr.shape)
        batch = random_batch(dims, b, rng)
        # margin placed inside the typical distance gap so some triplets are active
        a = float(rng.uniform(0.2, 1.5)) if alpha is None else alpha
        config = TrainConfig(b=b, tau=tau, alpha=a, lam=0.1 if terms is None else 1.0)
        decision, pseudo = random_decision(b, dims.K, rng)
        res = batch_objective(params, batch, config, stage, decision=decision, pseudo=pseudo, terms=terms)
        if res.min_relu_margin < KINK_MARGIN:
            continue
        if terms is None or "temp" in terms:
            m, dp, dn = _temporal_margins(params, batch, a)
            if np.min(np.abs(m)) < KINK_MARGIN or min(dp.min(), dn.min()) < KINK_MARGIN:
                continue
            if name == "temp" and not np.any(m > 0):
                continue
        return params, batch, config, stage, terms, decision, pseudo


def check_objective(name, n_configs=20, seed=0, eps=1e-5, tol=1e-4, grad_hook=None) -> CheckResult:
    t0 = time.perf_counter()
    worst, worst_coord = 0.0, ""
    for k in range(n_configs):
        params, batch, config, stage, terms, decision, pseudo = draw_configuration(name, [seed, k])
        dims = params.dims

        def f(flat):
            p = ModelParams.unflatten(dims, flat)
            return batch_objective(p, batch, config, stage, decision=decision, pseudo=pseudo, terms=terms).total

        res = batch_objective(params, batch, config, stage, decision=decision, pseudo=pseudo, terms=terms)
        analytic = res.grads.flatten()
        if grad_hook is not None:
            analytic = grad_hook(name, analytic)
        numeric = central_difference(f, params.flatten(), eps)
        err = relative_error(analytic, numeric)
        i = int(np.argmax(err))
        if err[i] > worst:
            worst, worst_coord = float(err[i]), f"config {k}: {coordinate_name(dims, i)}"
    return CheckResult(name, n_configs, worst, worst_coord, time.perf_counter() - t0, tol)


def run_gradcheck(n_configs=20, seed=0, eps=1e-5, tol=1e-4, names=None, grad_hook=None) -> list[CheckResult]:
    names = list(OBJECTIVES) if names is None else list(names)
    return [check_objective(n, n_configs, seed, eps, tol, grad_hook) for n in names]
