import numpy as np
import pytest

from promptfusion import gradcore as gc
from promptfusion.gate import Gate, activation_rate, gumbel_noise, gumbel_softmax
from promptfusion.gradcore import Value
from promptfusion.optim import AdamW


def gate(**kw):
    return Gate(6, hidden=8, seed=0, dtype=np.float64, **kw)


def test_symmetric_inputs_give_half():
    soft, hard, _ = gumbel_softmax(Value(np.log([[2.0, 2.0]])), 1.0, np.array([[0.3, 0.3]]))
    np.testing.assert_allclose(soft.data, [[0.5, 0.5]])


def test_low_temperature_is_one_hot_at_argmax():
    rng = np.random.default_rng(0)
    logs = Value(np.log(np.array([[0.7, 0.3]] * 1000)))
    noise = gumbel_noise(logs.shape, rng)
    soft, hard, _ = gumbel_softmax(logs, 0.01, noise)
    np.testing.assert_array_equal(hard.argmax(1), (logs.data + noise).argmax(1))
    err = np.abs(soft.data - hard).max(axis=1)
    gap = np.abs(np.diff(logs.data + noise, axis=1))[:, 0]
    # two-way softmax at temperature tau is within eps of one-hot iff gap >= tau*log((1-eps)/eps)
    bound = 0.01 * np.log((1 - 1e-3) / 1e-3)
    np.testing.assert_array_equal(err < 1e-3, gap > bound)
    assert np.mean(err < 1e-3) > 0.95


def test_tau_must_be_positive():
    with pytest.raises(ValueError):
        gumbel_softmax(Value(np.zeros((1, 2))), 0.0, np.zeros((1, 2)))
    with pytest.raises(ValueError):
        Gate(4, tau=-1.0)


def test_monte_carlo_mean_matches_categorical():
    g = gate()
    v = np.random.default_rng(3).normal(size=(1, 6))
    p = g.probabilities(v)[0]
    rng = np.random.default_rng(11)
    logs = np.repeat(g.log_scores(v).data, 100_000, axis=0)
    _, hard, _ = gumbel_softmax(Value(logs), 1.0, gumbel_noise(logs.shape, rng))
    np.testing.assert_allclose(hard.mean(axis=0), p, atol=0.02)


def test_straight_through_forward_is_hard_and_backward_is_soft():
    g = gate()
    v = np.random.default_rng(0).normal(size=(5, 6))
    soft, hard, st_out = g.gumbel_decision(v, np.random.default_rng(1))
    np.testing.assert_array_equal(st_out.data, hard)
    np.testing.assert_allclose(soft.data.sum(1), 1.0, atol=1e-12)
    w = g.params["w1"]
    (g_st,) = gc.gradients(gc.sum(st_out[:, 0]), [w])
    (g_soft,) = gc.gradients(gc.sum(g.gumbel_decision(v, np.random.default_rng(1))[0][:, 0]), [w])
    np.testing.assert_array_equal(g_st, g_soft)


def test_gate_gradients_through_soft_path_match_finite_differences():
    g = gate()
    v = np.random.default_rng(0).normal(size=(4, 6))
    noise = gumbel_noise((4, 2), np.random.default_rng(2), np.float64)
    probe = np.random.default_rng(5).normal(size=(4, 2))
    loss = lambda: gc.sum(gumbel_softmax(g.log_scores(v), 1.0, noise)[0] * probe)
    assert gc.grad_check(loss, g.trainable()).max_relative_error < 1e-4


def test_usage_penalty_and_distillation_terms():
    g = gate(zeta=0.5, rho=0.5)
    assert float(g.usage_penalty(np.array([1.0, 0.0, 1.0, 0.0])).data) == 0.0
    assert float(g.usage_penalty(np.ones(4)).data) == pytest.approx(0.5 * 4.0)
    v = np.random.default_rng(0).normal(size=(3, 6))
    assert float(g.distillation(v).data) == 0.0
    g.begin_task()
    g.end_task()
    g.snapshot()
    assert float(g.distillation(v).data) == pytest.approx(0.0, abs=1e-15)
    g.params["w2"].data += 0.5
    assert float(g.distillation(v).data) > 0.0


def test_snapshot_lifecycle():
    g = gate()
    with pytest.raises(RuntimeError):
        g.snapshot()
    g.begin_task()
    with pytest.raises(RuntimeError, match="mid-task"):
        g.snapshot()
    g.end_task()
    g.snapshot()
    frozen = {k: a.copy() for k, a in g.frozen_params.items()}
    g.begin_task()
    v = np.random.default_rng(0).normal(size=(8, 6))
    opt = AdamW(g.trainable(), lr=0.1)
    for _ in range(3):
        opt.zero_grad()
        loss = gc.sum(g.raw(v)) + g.distillation(v)
        loss.backward()
        opt.step()
    for k in frozen:
        np.testing.assert_array_equal(g.frozen_params[k], frozen[k])


def test_decide_is_deterministic_argmax():
    g = gate()
    v = np.random.default_rng(4).normal(size=(20, 6))
    d = g.decide(v)
    np.testing.assert_array_equal(d, g.decide(v))
    np.testing.assert_array_equal(d.argmax(1), g.log_scores(v).data.argmax(1))


def test_activation_rate():
    assert activation_rate([1, 1, 1]) == 1.0
    assert activation_rate(np.tile([0.0, 1.0], (4, 1))) == 0.0
    with pytest.raises(ValueError):
        activation_rate([])
