import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from promptfusion import gradcore as gc
from promptfusion.gradcore import Value


def param(rng, *shape, name=None, scale=1.0):
    return Value(rng.normal(0.0, scale, shape), requires_grad=True, name=name)


def check(graph, wrt, tol=1e-6, **kw):
    report = gc.grad_check(graph, wrt, **kw)
    assert report.max_relative_error < tol, report.per_tensor
    return report


# -- forward examples --------------------------------------------------------

def test_square_forward_and_gradient():
    x = Value(np.array(3.0), requires_grad=True)
    y = gc.evaluate(lambda v: v * v, x)
    assert float(y.data) == 9.0
    (g,) = gc.gradients(x * x, [x])
    assert float(g) == 6.0


def test_softmax_of_equal_logits_is_uniform():
    out = gc.softmax(Value(np.full(4, 2.5))).data
    np.testing.assert_allclose(out, [0.25] * 4)


def test_chained_matmul_matches_direct_product(rng):
    a, b, c = (rng.normal(size=(3, 3)) for _ in range(3))
    out = gc.evaluate(lambda x, y, z: (x @ y) @ z, a, b, c).data
    np.testing.assert_allclose(out, a @ b @ c, rtol=1e-12)


def test_sigmoid_derivative_at_zero():
    x = Value(np.array(0.0), requires_grad=True)
    (g,) = gc.gradients(gc.sigmoid(x), [x])
    assert float(g) == pytest.approx(0.25)


def test_non_scalar_loss_rejected(rng):
    x = param(rng, 3)
    with pytest.raises(gc.ShapeError):
        gc.gradients(x * 2.0, [x])
    with pytest.raises(gc.ShapeError):
        (x * 2.0).backward()


def test_shape_mismatch_names_the_op(rng):
    with pytest.raises(gc.ShapeError, match="matmul"):
        gc.matmul(param(rng, 2, 3), param(rng, 2, 3))


def test_frozen_values_never_accumulate_grad(rng):
    w = Value(rng.normal(size=(3, 2)))
    x = param(rng, 4, 3)
    loss = gc.sum(gc.tanh(x @ w))
    loss.backward()
    assert w.grad is None
    assert x.grad.shape == x.shape


def test_backward_does_not_mutate_forward_values(rng):
    x = param(rng, 3, 4)
    y = gc.softmax(x @ Value(rng.normal(size=(4, 5))))
    before = y.data.copy()
    gc.sum(gc.log(y)).backward()
    np.testing.assert_array_equal(before, y.data)


def test_linearity_of_gradients(rng):
    x = param(rng, 5)
    f = lambda v: gc.sum(gc.tanh(v))
    g = lambda v: gc.sum(v * v * v)
    (gf,) = gc.gradients(f(x), [x])
    (gg,) = gc.gradients(g(x), [x])
    (gs,) = gc.gradients(f(x) + g(x), [x])
    np.testing.assert_allclose(gs, gf + gg, rtol=1e-12)


# -- finite-difference checks per op (double precision) ----------------------

UNARY = {
    "exp": gc.exp, "tanh": gc.tanh, "sigmoid": gc.sigmoid, "softplus": gc.softplus,
    "neg": gc.neg, "softmax": lambda v: gc.softmax(v, axis=-1),
    "log_softmax": lambda v: gc.log_softmax(v, axis=-1),
    "transpose": lambda v: gc.transpose(v), "reshape": lambda v: gc.reshape(v, (-1,)),
    "max": lambda v: gc.max(v, axis=-1), "mean": lambda v: gc.mean(v, axis=0),
    "sum_keepdims": lambda v: gc.sum(v, axis=1, keepdims=True),
    "slice": lambda v: v[1:, ::2], "pow": lambda v: v ** 3,
}


@pytest.mark.parametrize("op", sorted(UNARY))
def test_unary_ops_match_finite_differences(op, rng):
    x = param(rng, 3, 4, name="x")
    probe = rng.normal(size=UNARY[op](x).shape)
    check(lambda: gc.sum(UNARY[op](x) * probe), [x])


def test_log_matches_finite_differences(rng):
    x = Value(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    check(lambda: gc.sum(gc.log(x) * 1.7), [x])


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_broadcasting_binary_ops(op, rng):
    a = param(rng, 3, 4, name="a")
    b = Value(rng.uniform(0.5, 2.0, (4,)), requires_grad=True, name="b")
    fn = getattr(gc, op)
    probe = rng.normal(size=(3, 4))
    check(lambda: gc.sum(fn(a, b) * probe), [a, b])


def test_matmul_batched(rng):
    a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
    probe = rng.normal(size=(2, 3, 5))
    check(lambda: gc.sum((a @ b) * probe), [a, b])


def test_concat_stack_take(rng):
    a, b = param(rng, 2, 3), param(rng, 4, 3)
    idx = np.array([0, 5, 5, 2])
    probe = rng.normal(size=(4, 3))
    check(lambda: gc.sum(gc.concat([a, b], axis=0)[idx] * probe), [a, b])
    check(lambda: gc.sum(gc.stack_rows([a[0], b[1]]) * probe[:2]), [a, b])


def test_layer_norm(rng):
    x, g, b = param(rng, 3, 8), param(rng, 8), param(rng, 8)
    probe = rng.normal(size=(3, 8))
    check(lambda: gc.sum(gc.layer_norm(x, g, b) * probe), [x, g, b])


def test_attention_with_16_dim_heads(rng):
    q, k, v = (param(rng, 1, 2, 5, 16, name=n, scale=0.5) for n in "qkv")
    probe = rng.normal(size=(1, 2, 5, 16))
    check(lambda: gc.sum(gc.attention(q, k, v) * probe), [q, k, v], tol=1e-4)


@pytest.mark.parametrize("reduction", ["sum", "mean"])
def test_cross_entropy(reduction, rng):
    z = param(rng, 6, 4)
    y = rng.integers(0, 4, 6)
    check(lambda: gc.cross_entropy(z, y, reduction=reduction), [z])


def test_cross_entropy_uniform_logits_is_log_k():
    loss = gc.cross_entropy(Value(np.zeros((3, 7))), np.array([0, 3, 6]))
    assert float(loss.data) == pytest.approx(3 * np.log(7))


def test_cross_entropy_rejects_out_of_range_labels():
    with pytest.raises(ValueError):
        gc.cross_entropy(Value(np.zeros((2, 3))), np.array([0, 3]))


def test_cosine_matrix(rng):
    a, b = param(rng, 4, 6), param(rng, 3, 6)
    probe = rng.normal(size=(4, 3))
    out = gc.cosine_matrix(a, b).data
    ref = (a.data / np.linalg.norm(a.data, axis=1, keepdims=True)) @ \
          (b.data / np.linalg.norm(b.data, axis=1, keepdims=True)).T
    np.testing.assert_allclose(out, ref, atol=1e-7)
    check(lambda: gc.sum(gc.cosine_matrix(a, b) * probe), [a, b])


def test_straight_through_forward_hard_backward_soft(rng):
    logits = param(rng, 5, 2)
    probe = rng.normal(size=(5, 2))
    soft = gc.softmax(logits)
    hard = np.eye(2)[soft.data.argmax(1)]
    st_out = gc.straight_through(hard, soft)
    np.testing.assert_array_equal(st_out.data, hard)
    (g_st,) = gc.gradients(gc.sum(st_out * probe), [logits])
    (g_soft,) = gc.gradients(gc.sum(gc.softmax(logits) * probe), [logits])
    np.testing.assert_array_equal(g_st, g_soft)


# -- grad_check contract -------------------------------------------------------

def test_grad_check_linear_map_is_exact(rng):
    w = param(rng, 3, 2)
    x = rng.normal(size=(4, 3))
    report = gc.grad_check(lambda: gc.sum(Value(x) @ w), [w])
    assert report.max_relative_error < 1e-8


def test_grad_check_flags_frozen_members(rng):
    w = param(rng, 3, name="w")
    frozen = Value(rng.normal(size=3), name="frozen")
    report = gc.grad_check(lambda: gc.sum(w * frozen), [w, frozen])
    assert report.frozen == ["frozen"]
    assert report.per_tensor["frozen"] == 0.0
    assert gc.gradients(gc.sum(w * frozen), [frozen]) == [None]


def test_grad_check_rejects_nonpositive_eps(rng):
    w = param(rng, 2)
    with pytest.raises(ValueError):
        gc.grad_check(lambda: gc.sum(w), [w], eps=0.0)


def test_no_grad_builds_no_graph(rng):
    x = param(rng, 3)
    with gc.no_grad():
        y = gc.tanh(x) * 2.0
    assert not y.requires_grad


def test_float32_scalars_keep_dtype():
    x = Value(np.ones(3, dtype=np.float32), requires_grad=True)
    assert (2.0 * x + 1.0).dtype == np.float32
    assert gc.sigmoid(x / 3.0).dtype == np.float32


# -- property tests -----------------------------------------------------------

finite = st.floats(-5, 5, allow_nan=False, width=64)


@given(arrays(np.float64, (3, 4), elements=finite))
def test_softmax_rows_sum_to_one(x):
    np.testing.assert_allclose(gc.softmax(Value(x)).data.sum(axis=-1), 1.0, atol=1e-12)


@given(arrays(np.float64, (2, 5), elements=finite), st.floats(-10, 10))
def test_softmax_shift_invariance(x, c):
    np.testing.assert_allclose(gc.softmax(Value(x)).data, gc.softmax(Value(x + c)).data, atol=1e-12)


@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (2, 3), elements=finite))
def test_product_rule_matches_finite_differences(a, b):
    va, vb = Value(a.copy(), requires_grad=True), Value(b.copy(), requires_grad=True)
    report = gc.grad_check(lambda: gc.sum(gc.tanh(va) * vb), [va, vb])
    assert report.max_relative_error < 1e-6
