"""Weighted fusion of the two branches and the class-balance mask."""
from __future__ import annotations

import enum

import numpy as np

from . import gradcore as gc
from .gradcore import Value


class MaskMode(str, enum.Enum):
    REHEARSAL = "rehearsal"
    MEMORY_FREE = "memory_free"


def build_mask(task_index: int, n_old: int, n_new: int, alpha, beta,
               mode: MaskMode | str = MaskMode.REHEARSAL) -> Value:
    """Per-class multipliers, old classes first.

    Rehearsal: ``[theta / sigmoid(beta), sigmoid(alpha)]`` with
    ``theta = task_index / 2``. Memory-free: ``[1 / sigmoid(beta), sigmoid(alpha)]``.
    """
    alpha, beta = gc.as_value(alpha), gc.as_value(beta)
    if alpha.shape != (n_new,) or beta.shape != (n_old,):
        raise ValueError(f"mask expects alpha ({n_new},) and beta ({n_old},), "
                         f"got {alpha.shape} and {beta.shape}")
    if task_index < 1:
        raise ValueError("task index starts at 1")
    mode = MaskMode(mode)
    numerator = task_index / 2.0 if mode is MaskMode.REHEARSAL else 1.0
    new = gc.sigmoid(alpha)
    if n_old == 0:
        return new
    return gc.concat([gc.div(numerator, gc.sigmoid(beta)), new], axis=0)


def _mix(S: Value, B, lam) -> Value:
    w = gc.sigmoid(gc.as_value(lam)) if lam is not None else 0.5
    return (1.0 - w) * S + w * B


def fuse(S, B, lam, W) -> Value:
    """``W * ((1 - sigmoid(lam)) S + sigmoid(lam) B)``; ``lam=None`` means 0, ``W=None`` means 1."""
    S, B = gc.as_value(S), gc.as_value(B)
    if S.shape != B.shape:
        raise ValueError(f"branch logits differ in shape: {S.shape} vs {B.shape}")
    if W is not None and gc.as_value(W).shape != S.shape[-1:]:
        raise ValueError(f"mask length {gc.as_value(W).shape} does not match logits {S.shape}")
    mixed = _mix(S, B, lam)
    return mixed if W is None else mixed * W


def gated_fuse(S, booster_fn, inputs, decisions, lam, W, dense: bool = False) -> Value:
    """Fusion where the Booster only runs on inputs whose decision is "use".

    ``decisions`` is a ``(B, 2)`` one-hot (array or straight-through Value);
    column 0 set means the Booster is used. Skipped rows contribute zero
    Booster logits and are never passed to ``booster_fn``.

    With ``dense=True`` the Booster runs on every row and its output is
    multiplied by the decision. The forward value is the same, but skipped
    rows still pass a straight-through gradient to their decision, which
    needs ``B(x)``. Training uses this; inference keeps the sparse path.
    """
    S = gc.as_value(S)
    decisions = gc.as_value(decisions)
    n, k = S.shape
    if decisions.shape != (n, 2):
        raise ValueError(f"decisions must be ({n}, 2), got {decisions.shape}")
    if W is not None and gc.as_value(W).shape != (k,):
        raise ValueError(f"mask length {gc.as_value(W).shape} does not match logits {S.shape}")
    active = np.arange(n) if dense else np.flatnonzero(decisions.data[:, 0] > 0.5)
    if active.size:
        B_sub = gc.as_value(booster_fn(inputs[active]))
        if B_sub.shape != (active.size, k):
            raise ValueError(f"booster returned {B_sub.shape}, expected {(active.size, k)}")
        index = np.full(n, active.size)
        index[active] = np.arange(active.size)
        padded = gc.concat([B_sub, np.zeros((1, k), dtype=S.dtype)], axis=0)
        B_full = padded[index]
    else:
        B_full = Value(np.zeros((n, k), dtype=S.dtype))
    use = gc.reshape(decisions[:, 0], (n, 1))
    mixed = _mix(S, use * B_full, lam)
    return mixed if W is None else mixed * W


class FusionParams:
    """Trainable ``lambda``, ``alpha`` (new classes) and ``beta`` (old classes).

    ``alpha``/``beta`` restart at zero every task: the previous task's new
    classes join the old block.
    """

    def __init__(self, mode: MaskMode | str = MaskMode.REHEARSAL, use_mask: bool = True,
                 use_lambda: bool = True, dtype=np.float32):
        self.mode = MaskMode(mode)
        self.use_mask = use_mask
        self.use_lambda = use_lambda
        self.dtype = dtype
        self.lam = Value(np.zeros((), dtype=dtype), requires_grad=use_lambda, name="fusion.lambda")
        self.alpha = Value(np.zeros(0, dtype=dtype), requires_grad=True, name="fusion.alpha")
        self.beta = Value(np.zeros(0, dtype=dtype), requires_grad=True, name="fusion.beta")
        self.task_index = 0

    @property
    def n_classes(self) -> int:
        return self.alpha.shape[0] + self.beta.shape[0]

    def begin_task(self, task_index: int, n_old: int, n_new: int) -> None:
        self.task_index = task_index
        self.alpha = Value(np.zeros(n_new, dtype=self.dtype), requires_grad=self.use_mask, name="fusion.alpha")
        self.beta = Value(np.zeros(n_old, dtype=self.dtype), requires_grad=self.use_mask, name="fusion.beta")

    def mask(self) -> Value | None:
        if not self.use_mask:
            return None
        return build_mask(self.task_index, self.beta.shape[0], self.alpha.shape[0],
                          self.alpha, self.beta, self.mode)

    def weight(self) -> Value | None:
        return self.lam if self.use_lambda else None

    def fuse(self, S, B, masked: bool = True) -> Value:
        return fuse(S, B, self.weight(), self.mask() if masked else None)

    def trainable(self) -> list[Value]:
        out = []
        if self.use_lambda:
            out.append(self.lam)
        if self.use_mask:
            if self.alpha.shape[0]:
                out.append(self.alpha)
            if self.beta.shape[0]:
                out.append(self.beta)
        return out
