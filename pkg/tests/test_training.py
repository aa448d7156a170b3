import math
from dataclasses import replace

import numpy as np
import pytest

import eventssm.ssm
from eventssm.events import AugmentConfig, EventStream, SynthConfig, gen_synthetic_timing_task
from eventssm.model import ModelConfig, init_weights
from eventssm.training import (
    MetricsRecord, TrainConfig, TrainState, cross_entropy_soft, evaluate, fit, format_ablation,
    gradcheck_model, lr_schedule, optimizer_step, run_ablation, tiny_config, train_epoch,
)

MODES = ["async", "dirac", "zoh", "zoh_unit_delta"]


def small_model(**kw):
    base = dict(num_channels=16, num_classes=2, num_layers=2, state_size=16, width=16, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def micro_task(n_train=8, n_test=0, events=64, seed=0):
    cfg = SynthConfig(events_per_sample=events, n_train=n_train, n_test=n_test)
    return gen_synthetic_timing_task(cfg, np.random.default_rng(seed))


def zero_grads(state):
    return {k: np.zeros_like(v) for k, v in state.weights.named_tensors().items()}


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


def test_cross_entropy_examples():
    onehot = np.eye(10)[[3]]
    assert cross_entropy_soft(np.zeros((1, 10)), onehot) == pytest.approx(math.log(10), abs=1e-12)
    assert cross_entropy_soft(np.array([[20.0, -20.0]]), np.array([[1.0, 0.0]])) < 1e-15
    soft = cross_entropy_soft(np.zeros((1, 2)), np.array([[0.75, 0.25]]))
    assert soft == pytest.approx(math.log(2), abs=1e-15)


def test_cross_entropy_soft_reduces_to_hard():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(6, 4)) * 3
    y = rng.integers(0, 4, 6)
    hard = -np.mean(logits[np.arange(6), y] - np.log(np.exp(logits).sum(axis=1)))
    assert cross_entropy_soft(logits, np.eye(4)[y]) == pytest.approx(hard, rel=1e-13)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(3, 5))
    labels = rng.dirichlet(np.ones(5), 3)
    _, grad = cross_entropy_soft(logits, labels, return_grad=True)
    num = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        e = np.zeros_like(logits)
        e[idx] = 1e-6
        num[idx] = (cross_entropy_soft(logits + e, labels) - cross_entropy_soft(logits - e, labels)) / 2e-6
    np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-9)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy_soft(np.zeros((1, 2)), np.array([[0.7, 0.7]]))
    with pytest.raises(ValueError):
        cross_entropy_soft(np.zeros((1, 2)), np.array([[1.5, -0.5]]))
    with pytest.raises(ValueError):
        cross_entropy_soft(np.zeros((1, 3)), np.array([[1.0, 0.0]]))


# --------------------------------------------------------------------------
# Optimizer and schedule
# --------------------------------------------------------------------------


def make_state(dtype=np.float64, seed=0):
    rng = np.random.default_rng(seed)
    return TrainState.create(init_weights(tiny_config(), rng, dtype), rng)


def test_zero_gradients_no_decay_leave_weights():
    s = make_state()
    out = optimizer_step(s, zero_grads(s), TrainConfig(weight_decay=0.0), lr=0.1)
    assert out.step == s.step + 1
    before, after = s.weights.named_tensors(), out.weights.named_tensors()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_zero_gradients_decoupled_decay():
    s = make_state()
    cfg = TrainConfig(weight_decay=0.5)
    out = optimizer_step(s, zero_grads(s), cfg, lr=0.1)
    before, after = s.weights.named_tensors(), out.weights.named_tensors()
    for k in before:
        dynamics = k.endswith(("ssm.phi", "ssm.theta", "ssm.log_delta"))
        factor = 1.0 if dynamics else 1.0 - 0.1 * 0.5
        np.testing.assert_allclose(after[k], before[k] * factor, rtol=1e-15, err_msg=k)
    decayed = optimizer_step(s, zero_grads(s), replace(cfg, ssm_weight_decay=True), lr=0.1)
    np.testing.assert_allclose(
        decayed.weights.layers[0].ssm.phi, s.weights.layers[0].ssm.phi * 0.95, rtol=1e-15
    )


def test_two_steps_match_hand_recursion():
    s = make_state()
    grads = zero_grads(s)
    grads["readout.b"][0] = 1.0
    cfg = TrainConfig(weight_decay=0.0)
    w0 = s.weights.readout_b[0]
    for _ in range(2):
        s = optimizer_step(s, grads, cfg, lr=0.1)
    # m1 = 0.1, v1 = 0.001; m2 = 0.19, v2 = 0.001999; both bias-corrected
    # ratios are exactly 1, so each step moves by 0.1 / (1 + 1e-8).
    assert s.m["readout.b"][0] == pytest.approx(0.19, rel=1e-15)
    assert s.v["readout.b"][0] == pytest.approx(0.001999, rel=1e-13)
    assert s.weights.readout_b[0] == pytest.approx(w0 - 0.2 / (1 + 1e-8), rel=1e-12)
    assert s.weights.readout_b[0] == pytest.approx(-0.199999998, abs=1e-12)
    assert s.step == 2


def test_ssm_learning_rate_scale():
    s = make_state()
    grads = {k: np.ones_like(v) for k, v in s.weights.named_tensors().items()}
    cfg = TrainConfig(weight_decay=0.0, ssm_lr_scale=0.1)
    out = optimizer_step(s, grads, cfg, lr=0.01)
    d_phi = s.weights.layers[0].ssm.phi - out.weights.layers[0].ssm.phi
    d_gate = s.weights.layers[0].gate_W - out.weights.layers[0].gate_W
    np.testing.assert_allclose(d_phi, 0.001 / (1 + 1e-8), rtol=1e-9)
    np.testing.assert_allclose(d_gate, 0.01 / (1 + 1e-8), rtol=1e-9)


def test_optimizer_ignores_gradient_order():
    s = make_state()
    rng = np.random.default_rng(3)
    grads = {k: rng.normal(size=v.shape) for k, v in s.weights.named_tensors().items()}
    reordered = dict(reversed(list(grads.items())))
    a = optimizer_step(s, grads, TrainConfig(), 0.01).weights.named_tensors()
    b = optimizer_step(s, reordered, TrainConfig(), 0.01).weights.named_tensors()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_optimizer_shape_errors():
    s = make_state()
    grads = zero_grads(s)
    grads["readout.W"] = np.zeros((1, 1))
    with pytest.raises(ValueError, match="shape"):
        optimizer_step(s, grads, TrainConfig(), 0.1)
    grads = zero_grads(s)
    del grads["embedding"]
    with pytest.raises(ValueError, match="embedding"):
        optimizer_step(s, grads, TrainConfig(), 0.1)


def test_lr_schedule_examples():
    cfg = TrainConfig(lr=1e-2, lr_floor=1e-5, warmup_steps=10)
    assert lr_schedule(0, cfg, 100) == 0.0
    assert lr_schedule(5, cfg, 100) == pytest.approx(5e-3)
    assert lr_schedule(10, cfg, 100) == pytest.approx(1e-2, rel=1e-15)
    assert lr_schedule(100, cfg, 100) == pytest.approx(1e-5, rel=1e-12)
    assert lr_schedule(500, cfg, 100) == pytest.approx(1e-5, rel=1e-12)
    mid = lr_schedule(55, cfg, 100)
    assert mid == pytest.approx(1e-5 + 0.5 * (1e-2 - 1e-5), rel=1e-12)
    no_warm = replace(cfg, warmup_steps=0)
    assert lr_schedule(0, no_warm, 100) == 1e-5
    assert lr_schedule(1, no_warm, 100) == pytest.approx(1e-2, rel=1e-3)
    assert lr_schedule(50, replace(cfg, schedule="constant"), 100) == 1e-2
    frozen = replace(cfg, lr=0.0)
    assert [lr_schedule(s, frozen, 100) for s in (0, 5, 50, 100)] == [0.0] * 4
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg, 100)


def test_lr_schedule_monotone_after_warmup():
    cfg = TrainConfig(warmup_steps=7)
    values = [lr_schedule(s, cfg, 60) for s in range(61)]
    assert all(a <= b for a, b in zip(values[:8], values[1:8]))
    assert all(a >= b for a, b in zip(values[7:], values[8:]))


@pytest.mark.parametrize("kwargs", [
    {"batch_size": 0}, {"lr": -1.0}, {"epochs": -1}, {"schedule": "step"}, {"precision": "half"},
])
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_train_config_accepts_augment_dict():
    cfg = TrainConfig(augment={"drop_prob": 0.2})
    assert cfg.augment == AugmentConfig(drop_prob=0.2)
    assert cfg.to_dict()["augment"]["drop_prob"] == 0.2


# --------------------------------------------------------------------------
# Loops
# --------------------------------------------------------------------------


def test_zero_learning_rate_keeps_initial_weights():
    data = micro_task()["train"]
    mcfg = small_model()
    tcfg = TrainConfig(epochs=2, batch_size=4, lr=0.0, warmup_steps=0, lr_floor=0.0)
    rng = np.random.default_rng(0)
    state = TrainState.create(init_weights(mcfg, rng), rng)
    initial = {k: v.copy() for k, v in state.weights.named_tensors().items()}
    state, _ = fit(mcfg, tcfg, data, state=state)
    assert state.step == 4
    final = state.weights.named_tensors()
    assert all(np.array_equal(initial[k], final[k]) for k in initial)


def test_overfit_micro_dataset():
    data = micro_task()["train"]
    mcfg = small_model()
    tcfg = TrainConfig(epochs=200, batch_size=8, lr=1e-2, lr_floor=1e-3, warmup_steps=10, weight_decay=0.0)
    state, history = fit(mcfg, tcfg, data)
    assert state.step == 200
    assert min(h.loss for h in history) < 0.05
    final = evaluate(state.weights, data, mcfg, tcfg, split="train")
    assert final.loss < 0.05
    assert final.accuracy == 1.0


def test_same_seed_same_metrics():
    data = micro_task(n_train=24, n_test=8, events=32)
    mcfg = small_model(dropout=0.1)
    tcfg = TrainConfig(epochs=2, batch_size=8, augment=AugmentConfig(0.1, 5, 1, 0.5), slice_len=24)
    runs = [fit(mcfg, tcfg, data["train"], {"test": data["test"]})[1] for _ in range(2)]
    assert [r.deterministic() for r in runs[0]] == [r.deterministic() for r in runs[1]]
    other = fit(mcfg, replace(tcfg, seed=1), data["train"], {"test": data["test"]})[1]
    assert [r.deterministic() for r in other] != [r.deterministic() for r in runs[0]]


def test_train_epoch_metrics():
    data = micro_task(n_train=10, events=20)["train"]
    mcfg = small_model()
    tcfg = TrainConfig(batch_size=4)
    rng = np.random.default_rng(0)
    state = TrainState.create(init_weights(mcfg, rng), rng)
    state, rec = train_epoch(state, data, mcfg, tcfg, epoch=1)
    assert state.step == 3
    assert rec.num_samples == 10 and rec.num_events == 200
    assert rec.events_per_second > 0 and rec.wall_time > 0
    assert 0.0 <= rec.accuracy <= 1.0
    assert set(rec.deterministic()) == set(MetricsRecord.DETERMINISTIC)
    with pytest.raises(ValueError):
        train_epoch(state, [], mcfg, tcfg)


def test_untrained_model_is_at_chance():
    # every sample is drawn from one timing law, so labels carry no signal
    cfg = SynthConfig(num_classes=2, interval_means_us=(2000.0, 2000.0), events_per_sample=64,
                      n_train=0, n_test=500)
    data = gen_synthetic_timing_task(cfg, np.random.default_rng(3))["test"]
    mcfg = small_model()
    w = init_weights(mcfg, np.random.default_rng(11))
    rec = evaluate(w, data, mcfg, TrainConfig())
    sigma = math.sqrt(0.25 / 500)
    assert abs(rec.accuracy - 0.5) <= 3 * sigma


def test_evaluate_handles_empty_samples():
    mcfg = small_model()
    w = init_weights(mcfg, np.random.default_rng(0))
    empty = EventStream(np.zeros(0, np.int64), np.zeros(0, np.int64), 16, 1)
    rec = evaluate(w, [empty, empty], mcfg, TrainConfig())
    assert rec.num_samples == 2 and rec.num_events == 0
    assert np.isfinite(rec.loss)


# --------------------------------------------------------------------------
# Gradient check
# --------------------------------------------------------------------------


@pytest.mark.parametrize("mode", MODES)
def test_gradcheck_passes(mode):
    report = gradcheck_model(tiny_config(mode), np.random.default_rng(0))
    assert report.passed, report.worst
    assert report.worst[1] <= 1e-3
    assert set(report.errors) >= {"embedding", "readout.W", "layers.1.proj.W", "layers.0.ssm.log_delta"}


def test_gradcheck_activation_gate():
    report = gradcheck_model(tiny_config("async", gate="activation"), np.random.default_rng(1))
    assert report.passed, report.worst


def test_gradcheck_rejects_zero_epsilon():
    with pytest.raises(ValueError):
        gradcheck_model(tiny_config(), np.random.default_rng(0), epsilon=0.0)


def test_gradcheck_detects_corrupted_backward(monkeypatch):
    original = eventssm.ssm.ssm_backward

    def flipped(*args, **kwargs):
        g = original(*args, **kwargs)
        g.B_re = -g.B_re
        return g

    monkeypatch.setattr(eventssm.ssm, "ssm_backward", flipped)
    report = gradcheck_model(tiny_config(), np.random.default_rng(0))
    assert not report.passed
    assert report.worst[0].endswith("ssm.B_re")


# --------------------------------------------------------------------------
# Ablation
# --------------------------------------------------------------------------


ABLATION_SYNTH = SynthConfig(events_per_sample=24, n_train=16, n_test=8)


def test_ablation_repeated_mode_identical_rows():
    tcfg = TrainConfig(epochs=1, batch_size=8)
    rows = run_ablation(small_model(width=8, state_size=8), tcfg, ["async", "async"], [0, 1], ABLATION_SYNTH)
    assert len(rows) == 2
    assert rows[0].accuracies == rows[1].accuracies
    assert len(rows[0].accuracies) == 2


def test_ablation_single_mode_report():
    tcfg = TrainConfig(epochs=1, batch_size=8)
    rows = run_ablation(small_model(width=8, state_size=8), tcfg, ["zoh"], [0, 1], ABLATION_SYNTH)
    table = format_ablation(rows)
    assert len(rows) == 1
    assert table.splitlines()[2].startswith("zoh ")
    assert len(table.splitlines()) == 3


def test_ablation_needs_two_seeds():
    with pytest.raises(ValueError):
        run_ablation(small_model(), TrainConfig(epochs=1), ["async"], [0], ABLATION_SYNTH)
