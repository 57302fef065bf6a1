"""Input checks shared by the estimator and the harness."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X) -> np.ndarray:
    """Return ``X`` as a finite float32 ``(N, H, W, C)`` array; a single image gains a batch axis."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (N, H, W, C), got {X.shape}")
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must be scaled to [0, 1]")
    return X


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(f"expected {n_samples} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("labels must be integer class ids")
    y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError("labels must be non-negative")
    return y
