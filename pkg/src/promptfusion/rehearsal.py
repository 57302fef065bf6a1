"""Old-task memory: a class-balanced exemplar buffer or Gaussian feature statistics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ExemplarBuffer:
    """Class-balanced store of exemplar keys, labels and images.

    Keys identify items in the source dataset so the buffer can be rebuilt
    from a checkpoint without storing images twice.
    """

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("buffer capacity must be positive")
        self.capacity = capacity
        self.seed = seed
        self.keys: dict[int, np.ndarray] = {}
        self.images: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return int(sum(len(k) for k in self.keys.values()))

    def counts(self) -> dict[int, int]:
        return {c: len(k) for c, k in sorted(self.keys.items())}

    def quotas(self, classes) -> dict[int, int]:
        classes = sorted(int(c) for c in classes)
        base, extra = divmod(self.capacity, len(classes))
        return {c: base + (1 if i < extra else 0) for i, c in enumerate(classes)}

    def update(self, images: np.ndarray, labels: np.ndarray, keys: np.ndarray,
               rng: np.random.Generator) -> None:
        """Admit exemplars of the classes in ``labels`` and rebalance every class.

        Classes already stored are cut down to the new quota by keeping their
        earliest entries; incoming items are chosen uniformly without
        replacement. A class that is both stored and incoming (domain streams)
        is resampled from the union.
        """
        labels = np.asarray(labels)
        keys = np.asarray(keys, dtype=np.int64)
        incoming = sorted(np.unique(labels).tolist())
        classes = sorted(set(self.keys) | set(incoming))
        if self.capacity < len(classes):
            raise ValueError(f"capacity {self.capacity} is smaller than the {len(classes)} classes seen")
        quota = self.quotas(classes)
        for c in classes:
            q = quota[c]
            if c in incoming:
                sel = np.flatnonzero(labels == c)
                cand_keys, cand_imgs = keys[sel], images[sel]
                if c in self.keys:
                    cand_keys = np.concatenate([self.keys[c], cand_keys])
                    cand_imgs = np.concatenate([self.images[c], cand_imgs])
                pick = rng.permutation(cand_keys.size)[:q]
                self.keys[c], self.images[c] = cand_keys[pick], cand_imgs[pick]
            else:
                self.keys[c], self.images[c] = self.keys[c][:q], self.images[c][:q]

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """All stored images and labels, classes in ascending id order."""
        if not self.keys:
            return np.zeros((0,)), np.zeros(0, dtype=np.int64)
        classes = sorted(self.keys)
        imgs = np.concatenate([self.images[c] for c in classes])
        labels = np.concatenate([np.full(len(self.keys[c]), c, dtype=np.int64) for c in classes])
        return imgs, labels

    def state(self) -> dict:
        return {"capacity": self.capacity, "keys": {str(c): k.tolist() for c, k in sorted(self.keys.items())}}

    def restore(self, state: dict, lookup) -> None:
        """Rebuild from :meth:`state`; ``lookup(keys)`` returns the images for keys."""
        self.capacity = state["capacity"]
        self.keys = {int(c): np.asarray(k, dtype=np.int64) for c, k in state["keys"].items()}
        self.images = {c: lookup(k) for c, k in self.keys.items()}


@dataclass
class _Moments:
    mean: np.ndarray
    scatter: np.ndarray
    count: int


class ClassFeatureStats:
    """Per (branch, class) feature mean and covariance.

    Means and scatter matrices are kept in float32 so that a checkpoint
    round trip reproduces them exactly. Statistics recorded twice for the same
    class (domain streams) are pooled.
    """

    def __init__(self, rel_shrinkage: float = 1e-4, var_floor: float = 1e-6):
        self.rel_shrinkage = rel_shrinkage
        self.var_floor = var_floor
        self._moments: dict[tuple[str, int], _Moments] = {}

    def classes(self, branch: str) -> list[int]:
        return sorted(c for b, c in self._moments if b == branch)

    def branches(self) -> list[str]:
        return sorted({b for b, _ in self._moments})

    def count(self, branch: str, cls: int) -> int:
        return self._moments[(branch, cls)].count

    def record(self, features: np.ndarray, labels: np.ndarray, branch: str) -> None:
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels)
        if features.ndim != 2 or features.shape[0] != labels.shape[0]:
            raise ValueError(f"{features.shape[0]} feature rows for {labels.shape[0]} labels")
        for c in np.unique(labels).tolist():
            x = features[labels == c]
            mu = x.mean(axis=0)
            dev = x - mu
            scatter = dev.T @ dev
            key = (branch, int(c))
            if key in self._moments:
                old = self._moments[key]
                n_a, n_b = old.count, x.shape[0]
                n = n_a + n_b
                delta = mu - old.mean
                mu = old.mean + delta * (n_b / n)
                scatter = old.scatter + scatter + np.outer(delta, delta) * (n_a * n_b / n)
                count = n
            else:
                count = x.shape[0]
            self._moments[key] = _Moments(mu.astype(np.float32), scatter.astype(np.float32), count)

    def mean(self, branch: str, cls: int) -> np.ndarray:
        return self._moments[(branch, cls)].mean.astype(np.float64)

    def covariance(self, branch: str, cls: int) -> np.ndarray:
        """Unbiased covariance plus ``eps * I``; diagonal when samples < dimension."""
        m = self._moments[(branch, cls)]
        d = m.mean.shape[0]
        scatter = m.scatter.astype(np.float64)
        cov = scatter / (m.count - 1) if m.count > 1 else np.zeros((d, d))
        if m.count < d:
            cov = np.diag(np.diag(cov))
        eps = self.rel_shrinkage * np.trace(cov) / d + self.var_floor
        return cov + eps * np.eye(d)

    def sample(self, classes, n_per_class: int, rng: np.random.Generator, branch: str,
               dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n_per_class`` features per class from ``N(mean, cov)``."""
        feats, labels = [], []
        for c in classes:
            key = (branch, int(c))
            if key not in self._moments:
                raise KeyError(f"no statistics recorded for class {c} on branch {branch!r}")
            cov = self.covariance(branch, int(c))
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise ValueError(f"covariance of class {c} ({branch}) is not positive definite") from None
            z = rng.standard_normal((n_per_class, cov.shape[0]))
            feats.append(self.mean(branch, int(c)) + z @ chol.T)
            labels.append(np.full(n_per_class, int(c), dtype=np.int64))
        return np.concatenate(feats).astype(dtype), np.concatenate(labels)

    # -- persistence ---------------------------------------------------------
    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for (b, c), m in sorted(self._moments.items()):
            out[f"stats/{b}/{c}/mean"] = m.mean
            out[f"stats/{b}/{c}/scatter"] = m.scatter
        return out

    def state(self) -> dict:
        return {"rel_shrinkage": self.rel_shrinkage, "var_floor": self.var_floor,
                "counts": {f"{b}/{c}": m.count for (b, c), m in sorted(self._moments.items())}}

    def restore(self, state: dict, tensors: dict[str, np.ndarray]) -> None:
        self.rel_shrinkage = state["rel_shrinkage"]
        self.var_floor = state["var_floor"]
        self._moments = {}
        for key, count in state["counts"].items():
            b, c = key.rsplit("/", 1)
            self._moments[(b, int(c))] = _Moments(
                tensors[f"stats/{b}/{c}/mean"].astype(np.float32),
                tensors[f"stats/{b}/{c}/scatter"].astype(np.float32), int(count))
