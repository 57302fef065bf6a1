"""Accuracy matrix bookkeeping, forgetting and feature-drift statistics."""
from __future__ import annotations

import numpy as np
from scipy.stats import gaussian_kde


class MetricsMatrix:
    """Lower-triangular ``R`` with ``R[T, i]`` the accuracy on task ``i`` after task ``T``.

    Indices are zero-based; entries above the diagonal stay NaN.
    """

    def __init__(self, n_tasks: int):
        if n_tasks < 1:
            raise ValueError("need at least one task")
        self.R = np.full((n_tasks, n_tasks), np.nan)

    @classmethod
    def from_rows(cls, rows) -> "MetricsMatrix":
        rows = [list(r) for r in rows]
        m = cls(len(rows))
        for t, row in enumerate(rows):
            m.set_row(t, row)
        return m

    def set_row(self, t: int, row) -> None:
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (t + 1,):
            raise ValueError(f"row {t} needs {t + 1} entries, got {row.shape[0] if row.ndim else 0}")
        if np.any(row < 0) or np.any(row > 1):
            raise ValueError("accuracies must lie in [0, 1]")
        self.R[t, : t + 1] = row

    def rows(self) -> list[list[float]]:
        return [self.R[t, : t + 1].tolist() for t in range(self.R.shape[0])]


def _as_matrix(R) -> np.ndarray:
    if isinstance(R, MetricsMatrix):
        return R.R
    if isinstance(R, (list, tuple)):
        n = len(R)
        out = np.full((n, n), np.nan)
        for t, row in enumerate(R):
            out[t, : len(row)] = row
        return out
    return np.asarray(R, dtype=np.float64)


def average_accuracy(R, T: int | None = None) -> float:
    """``A_T``: mean of row ``T`` (1-based) over tasks ``1..T``; default is the last row."""
    R = _as_matrix(R)
    T = R.shape[0] if T is None else T
    if not 1 <= T <= R.shape[0]:
        raise ValueError(f"T={T} outside 1..{R.shape[0]}")
    row = R[T - 1, :T]
    if np.isnan(row).any():
        raise ValueError(f"row {T} has missing entries")
    return float(row.sum() / T)


def forgetting_profile(R) -> dict:
    """Per-task drops ``R[i, i] - R[T, i]`` for ``i < T`` and their mean."""
    R = _as_matrix(R)
    T = R.shape[0]
    if T < 2:
        raise ValueError("forgetting needs at least two tasks")
    diag, last = np.diag(R)[: T - 1], R[T - 1, : T - 1]
    if np.isnan(diag).any() or np.isnan(last).any():
        raise ValueError("matrix has missing entries")
    drops = (diag - last).tolist()
    return {"drops": drops, "mean_drop": float(sum(drops) / len(drops))}


def accuracy(y_true, y_pred) -> float:
    """Fraction correct, counted through the confusion-matrix trace."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("empty evaluation set")
    labels, inv = np.unique(np.concatenate([y_true, y_pred]), return_inverse=True)
    k = labels.size
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (inv[: y_true.size], inv[y_true.size:]), 1)
    return float(np.trace(conf) / y_true.size)


def random_direction(dim: int, seed: int = 0) -> np.ndarray:
    u = np.random.default_rng([seed, dim]).standard_normal(dim)
    return u / np.linalg.norm(u)


def kde_profile(before, after, seed: int = 0, grid_points: int = 256) -> dict:
    """Project both sets onto a seeded unit direction and fit Gaussian KDEs.

    Returns the grid, both densities and their total-variation distance.
    The grid spans both samples plus three bandwidths on each side.
    """
    before = np.atleast_2d(np.asarray(before, dtype=np.float64))
    after = np.atleast_2d(np.asarray(after, dtype=np.float64))
    if before.shape[0] == 0 or after.shape[0] == 0:
        raise ValueError("both feature sets must be non-empty")
    if before.shape[1] != after.shape[1]:
        raise ValueError(f"dimension mismatch: {before.shape[1]} vs {after.shape[1]}")
    u = random_direction(before.shape[1], seed)
    a, b = before @ u, after @ u
    kde_a, kde_b = gaussian_kde(a), gaussian_kde(b)
    pad = 3.0 * max(float(np.sqrt(kde_a.covariance[0, 0])), float(np.sqrt(kde_b.covariance[0, 0])))
    lo = min(a.min(), b.min()) - pad
    hi = max(a.max(), b.max()) + pad
    grid = np.linspace(lo, hi, grid_points)
    pa, pb = kde_a(grid), kde_b(grid)
    tv = 0.5 * float(np.trapezoid(np.abs(pa - pb), grid))
    return {"grid": grid, "before": pa, "after": pb, "divergence": tv}


def kde_shift(before, after, seed: int = 0, grid_points: int = 256) -> float:
    """Total-variation distance between 1-D KDEs of the two feature sets."""
    return kde_profile(before, after, seed, grid_points)["divergence"]
