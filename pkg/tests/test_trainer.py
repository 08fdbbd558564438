import json

import numpy as np
import pytest

from osvda import data, losses
from osvda.data import SynthConfig, make_batches, strip_labels, synth_dataset
from osvda.network import ModelDims, ModelParams, init_params
from osvda.trainer import (
    STAGE_ONE,
    STAGE_TWO,
    TrainConfig,
    TrainState,
    batch_objective,
    sgd_step,
    train,
    train_stage1,
    train_stage2,
)


def _state(dims, seed=0):
    return TrainState.fresh(dims, seed)


def _const_grads(params, value):
    g = ModelParams.zeros_like(params)
    for arr in g.arrays.values():
        arr += value
    return g


def test_sgd_plain_step(small_dims):
    st = _state(small_dims)
    before = st.params.flatten()
    g = _const_grads(st.params, 0.25)
    sgd_step(st, g, lr=1.0, momentum=0.0)
    assert np.array_equal(st.params.flatten(), before - 0.25)


def test_sgd_zero_grad_decays_velocity(small_dims):
    st = _state(small_dims)
    for arr in st.velocity.arrays.values():
        arr += 2.0
    before = st.params.flatten()
    sgd_step(st, ModelParams.zeros_like(st.params), lr=0.0, momentum=0.9)
    assert np.array_equal(st.params.flatten(), before)
    assert np.allclose(st.velocity.flatten(), 1.8)


def test_sgd_two_steps_momentum(small_dims):
    st = _state(small_dims)
    before = st.params.flatten()
    g = _const_grads(st.params, 1.0)
    for _ in range(2):
        sgd_step(st, g, lr=0.1, momentum=0.5)
    assert np.allclose(before - st.params.flatten(), 0.1 * (2 + 0.5), atol=1e-15)


def test_sgd_lr_zero_fixed(small_dims, rng):
    st = _state(small_dims)
    before = st.params.flatten()
    g = ModelParams.unflatten(small_dims, rng.standard_normal(st.params.size))
    sgd_step(st, g, lr=0.0, momentum=0.9)
    assert np.array_equal(st.params.flatten(), before)


def test_sgd_non_finite_names_parameter(small_dims):
    st = _state(small_dims)
    g = ModelParams.zeros_like(st.params)
    g["proj.w2"][0, 0] = np.inf
    with pytest.raises(FloatingPointError, match="proj.w2"):
        sgd_step(st, g, 0.1, 0.9)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(stage1_epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(rejection_mode="nope")


@pytest.fixture(scope="module")
def tiny_data():
    cfg = SynthConfig(K=3, num_private=2, D=4, c=3, samples_per_class=12, seed=1)
    source, target = synth_dataset(cfg)
    return source, target


TINY_DIMS = ModelDims(D=4, c=3, H=12, F=8, P=6, K=3)


def test_zero_epochs_leave_state(tiny_data):
    source, target = tiny_data
    cfg = TrainConfig(stage1_epochs=0, stage2_epochs=0, b=8)
    st = _state(TINY_DIMS, 3)
    ref = st.copy()
    train_stage1(source, target, cfg, st)
    assert st.params == ref.params and st.history == []
    train_stage2(source, target, cfg, st)
    assert st.params == ref.params and st.stage == STAGE_TWO


def test_training_deterministic_and_label_blind(tiny_data):
    source, target = tiny_data
    cfg = TrainConfig(stage1_epochs=2, stage2_epochs=2, b=8, seed=5)
    data.reset_target_label_reads()
    a = train(source, strip_labels(target), cfg, TINY_DIMS, monitor_target=target)
    b = train(source, strip_labels(target), cfg, TINY_DIMS, monitor_target=target)
    assert data.target_label_reads() == 0
    assert a.params == b.params
    assert a.history_json() == b.history_json()
    for rec in a.history:
        for k, v in rec.items():
            if isinstance(v, float):
                assert np.isfinite(v)
    stage2 = [r for r in a.history if r["stage"] == STAGE_TWO]
    assert len(stage2) == 2 and "pseudo_all_acc" in stage2[0] and "rejection_rate" in stage2[0]
    json.loads(a.history_json())


def test_stage1_terms(tiny_data):
    source, target = tiny_data
    cfg = TrainConfig(stage1_epochs=1, stage2_epochs=0, b=8)
    st = _state(TINY_DIMS)
    train_stage1(source, target, cfg, st)
    assert set(st.history[0]) == {"stage", "epoch", "ce", "sup", "aug", "temp", "total"}


def test_gamma_one_disables_cross(tiny_data):
    source, target = tiny_data
    cfg = TrainConfig(stage1_epochs=1, stage2_epochs=2, b=8, gamma=1.0)
    before = losses.diagnostics["empty_cross"]
    st = train(source, strip_labels(target), cfg, TINY_DIMS, monitor=False)
    for rec in st.history:
        if rec["stage"] == STAGE_TWO:
            assert rec["cross"] == 0.0
            assert rec["rejection_rate"] == 1.0
    assert losses.diagnostics["empty_cross"] > before


def test_stage2_rejected_rows_get_unknown_label(tiny_data):
    source, target = tiny_data
    params = init_params(TINY_DIMS, 0)
    batch = make_batches(source, strip_labels(target), 8, seed=0)[0]
    cfg = TrainConfig(b=8)
    from osvda.openset import RejectionDecision

    s = np.array([1, 1, 1, 1, 1, 1, 1, 1])
    dec = RejectionDecision(s, np.zeros(8, dtype=int), np.zeros(8))
    res = batch_objective(params, batch, cfg, STAGE_TWO, decision=dec, pseudo=np.zeros(8, dtype=int), terms={"open"})
    assert res.rejected == 8 and res.accepted == 0


def test_entropy_mode_runs(tiny_data):
    source, target = tiny_data
    cfg = TrainConfig(stage1_epochs=1, stage2_epochs=1, b=8, rejection_mode="entropy")
    st = train(source, strip_labels(target), cfg, TINY_DIMS, monitor_target=target)
    assert 0.0 <= st.history[-1]["rejection_rate"] <= 1.0


def test_source_ce_decreases_with_small_lr():
    cfg_data = SynthConfig(K=6, num_private=6, D=16, c=3, samples_per_class=50, domain_shift=0.5, feature_scale=0.2, seed=0)
    source, target = synth_dataset(cfg_data)
    cfg = TrainConfig(stage1_epochs=10, stage2_epochs=0, lr=0.001)
    st = _state(ModelDims(), cfg.seed)
    train_stage1(source, strip_labels(target), cfg, st)
    ce = [r["ce"] for r in st.history]
    assert all(b < a for a, b in zip(ce, ce[1:])), ce
