"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every trainable tensor in the package is a :class:`Value`. Operations build a
graph only when at least one input requires a gradient, so forward passes
through frozen encoders with frozen inputs cost nothing extra.

The operation set is deliberately small: exactly what the prompt-tuned heads,
the fusion objective and the gate need, each with a hand-written adjoint.
"""
from __future__ import annotations

import builtins
import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Value", "ShapeError", "no_grad", "as_value", "add", "sub", "mul", "div",
    "neg", "matmul", "concat", "stack_rows", "take", "reshape", "transpose",
    "exp", "log", "tanh", "sigmoid", "softplus", "softmax", "log_softmax",
    "layer_norm", "attention", "cross_entropy", "sum", "mean", "max",
    "cosine_matrix", "straight_through", "evaluate", "gradients",
    "grad_check", "GradCheckReport",
]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when an operation receives inputs of incompatible shape."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Value:
    """A tensor node in the computation graph.

    Leaves created by the user carry ``requires_grad``; interior nodes inherit
    it from their parents. ``grad`` is populated by :meth:`backward` for leaves
    only.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Value, ...] = ()
        self._backward: Callable | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Value":
        return Value(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Value(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return take(self, index)

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return _node(x ** exponent, (self,), lambda g: (g * exponent * x ** (exponent - 1),), "pow")

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def max(self, axis=-1): return max(self, axis)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes or None)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def tanh(self): return tanh(self)
    def sigmoid(self): return sigmoid(self)

    @property
    def T(self): return transpose(self, None)

    # -- backward ------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every trainable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        for leaf, g in _backprop(self, grad).items():
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _const(x, like: np.ndarray) -> Value:
    if isinstance(x, Value):
        return x
    return Value(np.asarray(x, dtype=like.dtype))


def _node(data, parents: Sequence[Value], backward: Callable, op: str) -> Value:
    out = Value(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topo(root: Value) -> list[Value]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(root: Value, seed: np.ndarray) -> dict[Value, np.ndarray]:
    grads: dict[int, np.ndarray] = {id(root): seed}
    leaves: dict[Value, np.ndarray] = {}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"adjoint of {node.op} produced {pg.shape}, expected {parent.shape}")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise ---------------------------------------------------------

def _pair(a, b) -> tuple[Value, Value]:
    if isinstance(a, Value):
        return a, _const(b, a.data)
    if isinstance(b, Value):
        return _const(a, b.data), b
    return as_value(a), as_value(b)


def add(a, b) -> Value:
    a, b = _pair(a, b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Value:
    a, b = _pair(a, b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Value:
    a, b = _pair(a, b)
    _check_broadcast("mul", a.data, b.data)
    x, y = a.data, b.data
    return _node(x * y, (a, b),
                 lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)), "mul")


def div(a, b) -> Value:
    a, b = _pair(a, b)
    _check_broadcast("div", a.data, b.data)
    x, y = a.data, b.data
    out = x / y
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)), "div")


def neg(a) -> Value:
    a = as_value(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Value:
    a = as_value(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Value:
    a = as_value(a)
    x = a.data
    return _node(np.log(x), (a,), lambda g: (g / x,), "log")


def tanh(a) -> Value:
    a = as_value(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Value:
    a = as_value(a)
    out = _sigmoid_np(np.atleast_1d(a.data)).reshape(a.shape)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Value:
    a = as_value(a)
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype)
    s = _sigmoid_np(np.atleast_1d(x)).reshape(x.shape)
    return _node(out, (a,), lambda g: (g * s,), "softplus")


# -- linear algebra and shape ---------------------------------------------

def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    x, y = a.data, b.data
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {x.shape} @ {y.shape}")

    def backward(g):
        return (_unbroadcast(g @ _swap(y), x.shape), _unbroadcast(_swap(x) @ g, y.shape))

    return _node(x @ y, (a, b), backward, "matmul")


def concat(values: Sequence, axis: int = 0) -> Value:
    vals = [as_value(v) for v in values]
    if not vals:
        raise ShapeError("concat: no inputs")
    ax = axis % vals[0].ndim
    for v in vals[1:]:
        if v.ndim != vals[0].ndim or any(
            i != ax and s != t for i, (s, t) in enumerate(zip(v.shape, vals[0].shape))
        ):
            raise ShapeError(f"concat: shape {v.shape} does not match {vals[0].shape} off axis {axis}")
    sizes = np.cumsum([v.shape[ax] for v in vals])[:-1]
    out = np.concatenate([v.data for v in vals], axis=ax)
    return _node(out, vals, lambda g: tuple(np.split(g, sizes, axis=ax)), "concat")


def stack_rows(values: Sequence) -> Value:
    """Stack equally shaped values along a new leading axis."""
    vals = [as_value(v) for v in values]
    return concat([reshape(v, (1,) + v.shape) for v in vals], axis=0)


def take(a, index) -> Value:
    """Basic or integer-array indexing; the adjoint scatters back with ``np.add.at``."""
    a = as_value(a)
    x = a.data
    out = x[index]

    def backward(g):
        full = np.zeros_like(x)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, copy=True), (a,), backward, "take")


def reshape(a, shape) -> Value:
    a = as_value(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Value:
    a = as_value(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


# -- reductions --------------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False) -> Value:  # noqa: A001 - mirrors numpy
    a = as_value(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _node(out, (a,), lambda g: (np.array(_expand(g, shape, axis, keepdims)),), "sum")


def mean(a, axis=None, keepdims=False) -> Value:
    a = as_value(a)
    shape = a.shape
    n = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    return _node(out, (a,), lambda g: (np.array(_expand(g, shape, axis, keepdims)) / n,), "mean")


def max(a, axis: int = -1) -> Value:  # noqa: A001 - mirrors numpy
    """Maximum along one axis; ties route the gradient to the first maximiser."""
    a = as_value(a)
    x = a.data
    idx = np.argmax(x, axis=axis)
    out = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(x)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _node(out, (a,), backward, "max")


# -- fused nonlinear ops -------------------------------------------------------

def softmax(a, axis: int = -1) -> Value:
    a = as_value(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _node(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(a, axis: int = -1) -> Value:
    a = as_value(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _node(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Value:
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = as_value(x), as_value(gamma), as_value(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} for width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _node(out, (x, gamma, beta), backward, "layer_norm")


def attention(q, k, v) -> Value:
    """Scaled dot-product attention over the last two axes: softmax(q k^T / sqrt(d)) v."""
    q, k, v = as_value(q), as_value(k), as_value(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attention: q{q.shape} k{k.shape} v{v.shape}")
    scale = float(q.shape[-1]) ** -0.5
    s = (q.data @ _swap(k.data)) * scale
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def backward(g):
        gv = _swap(p) @ g
        gp = g @ _swap(v.data)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        return gs @ k.data, _swap(gs) @ q.data, gv

    return _node(out, (q, k, v), backward, "attention")


def cross_entropy(logits, labels, reduction: str = "sum") -> Value:
    """Softmax cross-entropy of ``(B, K)`` logits against integer labels."""
    logits = as_value(logits)
    y = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {y.shape}")
    n, k = logits.shape
    if n and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"cross_entropy: labels must lie in [0, {k})")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    losses = -logp[np.arange(n), y]
    denom = 1.0 if reduction == "sum" else float(builtins.max(n, 1))
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), y] -= 1.0
        return (grad * (g / denom),)

    return _node(np.asarray(losses.sum() / denom, dtype=x.dtype), (logits,), backward, "cross_entropy")


def cosine_matrix(a, b, eps: float = 1e-8) -> Value:
    """Pairwise cosine similarity between rows of ``a`` (N, d) and ``b`` (K, d)."""
    a, b = as_value(a), as_value(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_matrix: {a.shape} vs {b.shape}")
    na = np.sqrt((a.data ** 2).sum(axis=1, keepdims=True)) + eps
    nb = np.sqrt((b.data ** 2).sum(axis=1, keepdims=True)) + eps
    ua, ub = a.data / na, b.data / nb
    out = ua @ ub.T

    def backward(g):
        ga_u = g @ ub
        gb_u = g.T @ ua
        ga = (ga_u - ua * (ga_u * ua).sum(axis=1, keepdims=True)) / na
        gb = (gb_u - ub * (gb_u * ub).sum(axis=1, keepdims=True)) / nb
        return ga, gb

    return _node(out, (a, b), backward, "cosine_matrix")


def straight_through(hard, soft) -> Value:
    """Detached replacement: forward value is ``hard``, gradient flows to ``soft``."""
    soft = as_value(soft)
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: {hard.shape} vs {soft.shape}")
    return _node(hard.copy(), (soft,), lambda g: (g,), "straight_through")


# -- functional graph API ------------------------------------------------------

def evaluate(graph: Callable[..., Value], *inputs) -> Value:
    """Run ``graph`` on ``inputs`` (arrays or Values) and return its output."""
    return graph(*[as_value(x) for x in inputs])


def gradients(loss: Value, wrt: Iterable[Value]) -> list[np.ndarray | None]:
    """Return d(loss)/d(w) for each ``w``; frozen members get ``None``.

    Unlike :meth:`Value.backward` this does not touch ``.grad`` on any node.
    """
    if loss.data.size != 1:
        raise ShapeError(f"gradients: loss must be scalar, got shape {loss.shape}")
    wrt = list(wrt)
    leaves = _backprop(loss, np.ones_like(loss.data)) if loss.requires_grad else {}
    out = []
    for w in wrt:
        if not w.requires_grad:
            out.append(None)
        else:
            out.append(leaves.get(w, np.zeros_like(w.data)))
    return out


@dataclass
class GradCheckReport:
    max_relative_error: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    frozen: list[str] = field(default_factory=list)

    def __float__(self) -> float:
        return self.max_relative_error


def grad_check(graph: Callable[[], Value], wrt: Sequence[Value], eps: float = 1e-6,
               max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``graph`` is re-evaluated for each perturbation, so it must rebuild the
    forward pass from the current ``wrt`` data. The error per entry is
    ``|analytic - numeric| / max(1, |numeric|)``. Frozen tensors in ``wrt`` are
    reported as zero-gradient and listed in ``frozen``. ``max_entries`` caps
    the number of randomly chosen entries checked per tensor.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(seed)
    analytic = gradients(graph(), wrt)
    report = GradCheckReport(0.0)
    for i, (w, ga) in enumerate(zip(wrt, analytic)):
        label = w.name or f"wrt[{i}]"
        if ga is None:
            report.frozen.append(label)
            report.per_tensor[label] = 0.0
            continue
        flat = w.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for j in idx:
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(graph().data)
            flat[j] = orig - eps
            fm = float(graph().data)
            flat[j] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(ga.reshape(-1)[j] - num) / builtins.max(1.0, abs(num))
            worst = err if err > worst else worst
        report.per_tensor[label] = worst
        report.max_relative_error = worst if worst > report.max_relative_error else report.max_relative_error
    return report
