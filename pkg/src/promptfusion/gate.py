"""Per-input Booster gate for the Lite variant.

A two-layer tanh MLP scores {use Booster, skip Booster}. Training draws a
straight-through Gumbel-Softmax decision; evaluation takes the argmax of the
scores without noise.
"""
from __future__ import annotations

import numpy as np

from . import gradcore as gc
from .gradcore import Value

POSITIVE_SHIFT = 1e-6


def gumbel_noise(shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0)
    return (-np.log(-np.log(u))).astype(dtype)


def gumbel_softmax(log_scores: Value, tau: float, noise: np.ndarray) -> tuple[Value, np.ndarray, Value]:
    """Relaxed draw ``softmax((log_scores + noise) / tau)``.

    Returns ``(soft, hard, straight_through)`` where ``hard`` is the one-hot
    argmax of ``soft`` and ``straight_through`` carries ``hard`` forward and
    ``soft``'s gradient backward.
    """
    if tau <= 0:
        raise ValueError("temperature tau must be positive")
    soft = gc.softmax((log_scores + noise) / tau, axis=-1)
    hard = np.zeros_like(soft.data)
    hard[np.arange(hard.shape[0]), soft.data.argmax(axis=-1)] = 1.0
    return soft, hard, gc.straight_through(hard, soft)


class Gate:
    """Decision network ``F`` with its frozen previous-task copy ``F'``."""

    def __init__(self, in_dim: int, hidden: int = 64, tau: float = 1.0, rho: float = 0.5,
                 zeta: float = 0.1, delta: float = 1.0, seed: int = 0, dtype=np.float32):
        if tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if zeta < 0 or delta < 0:
            raise ValueError("loss weights must be non-negative")
        self.tau, self.rho, self.zeta, self.delta = float(tau), float(rho), float(zeta), float(delta)
        self.dtype = dtype
        rng = np.random.default_rng([seed, 0x6A7E])
        self.params = {
            "w1": Value(rng.normal(0, in_dim ** -0.5, (in_dim, hidden)).astype(dtype), requires_grad=True, name="gate.w1"),
            "b1": Value(np.zeros(hidden, dtype), requires_grad=True, name="gate.b1"),
            "w2": Value(rng.normal(0, hidden ** -0.5, (hidden, 2)).astype(dtype), requires_grad=True, name="gate.w2"),
            "b2": Value(np.zeros(2, dtype), requires_grad=True, name="gate.b2"),
        }
        self.frozen_params: dict[str, np.ndarray] | None = None
        self._phase = "idle"  # idle -> training -> ended -> (snapshot) idle

    # -- network -------------------------------------------------------
    def _forward(self, v, params) -> Value:
        v = gc.as_value(np.asarray(v, dtype=self.dtype))
        return gc.tanh(v @ params["w1"] + params["b1"]) @ params["w2"] + params["b2"]

    def raw(self, v) -> Value:
        """Output of ``F``: two unconstrained scores per input."""
        return self._forward(v, self.params)

    def log_scores(self, v) -> Value:
        """``log F(v)`` after softplus and a small shift make ``F`` positive."""
        return gc.log(gc.softplus(self.raw(v)) + POSITIVE_SHIFT)

    def probabilities(self, v) -> np.ndarray:
        """Categorical the relaxed draw follows: ``F / sum(F)`` after the positivity map."""
        with gc.no_grad():
            return gc.softmax(self.log_scores(v), axis=-1).data

    # -- decisions -------------------------------------------------------
    def gumbel_decision(self, v, rng: np.random.Generator, tau: float | None = None):
        """Training-time decision: ``(soft, hard, straight_through)`` per input."""
        tau = self.tau if tau is None else tau
        log_scores = self.log_scores(v)
        return gumbel_softmax(log_scores, tau, gumbel_noise(log_scores.shape, rng, self.dtype))

    def decide(self, v) -> np.ndarray:
        """Deterministic evaluation decisions as a ``(B, 2)`` one-hot."""
        with gc.no_grad():
            scores = self.log_scores(v).data
        hard = np.zeros_like(scores)
        hard[np.arange(scores.shape[0]), scores.argmax(axis=1)] = 1.0
        return hard

    # -- loss terms -------------------------------------------------------
    def usage_penalty(self, use: Value) -> Value:
        """``zeta * (sum_i M_i0 - rho * batch)^2`` for one batch of decisions."""
        use = gc.as_value(use)
        gamma = self.rho * use.shape[0]
        dev = gc.sum(use) - gamma
        return self.zeta * dev * dev

    def distillation(self, v) -> Value:
        """Mean ``KL(softmax(F'(v)) || softmax(F(v)))``; zero before the first snapshot."""
        if self.frozen_params is None:
            return Value(np.zeros((), dtype=self.dtype))
        frozen = {k: Value(a) for k, a in self.frozen_params.items()}
        with gc.no_grad():
            p_old = gc.softmax(self._forward(v, frozen), axis=-1).data
        logp_new = gc.log_softmax(self.raw(v), axis=-1)
        logp_old = np.log(np.clip(p_old, np.finfo(self.dtype).tiny, None))
        kl = gc.sum(gc.mul(p_old, logp_old - logp_new), axis=1)
        return gc.mean(kl)

    # -- task boundaries ---------------------------------------------------------
    def begin_task(self) -> None:
        self._phase = "training"

    def end_task(self) -> None:
        if self._phase != "training":
            raise RuntimeError("end_task() without a task in progress")
        self._phase = "ended"

    def snapshot(self) -> None:
        """Freeze a copy of ``F`` as ``F'``; only valid once the task has ended."""
        if self._phase == "training":
            raise RuntimeError("snapshot requested mid-task; finish the task first")
        if self._phase != "ended":
            raise RuntimeError("snapshot requested with no finished task")
        self.frozen_params = {k: v.data.copy() for k, v in self.params.items()}
        self._phase = "idle"

    def trainable(self) -> list[Value]:
        return list(self.params.values())


def activation_rate(decisions) -> float:
    """Fraction of decisions that used the Booster.

    Accepts a sequence of 0/1 flags or ``(B, 2)`` one-hot rows.
    """
    d = np.asarray(decisions, dtype=np.float64)
    if d.size == 0:
        raise ValueError("decision log is empty")
    use = d[:, 0] if d.ndim == 2 else d
    return float(use.mean())
