"""Datasets, task streams, manifest I/O and synthetic generators."""
from __future__ import annotations

import csv
import enum
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "Dataset", "Task", "TaskStream", "StreamMode", "ManifestError",
    "make_class_incremental_stream", "make_domain_incremental_stream",
    "load_manifest", "write_manifest", "make_split_blobs", "make_domain_blobs",
]


class ManifestError(ValueError):
    """A manifest could not be read; the message names the offending row."""


class StreamMode(str, enum.Enum):
    CLASS_INCREMENTAL = "class"
    DOMAIN_INCREMENTAL = "domain"


@dataclass(frozen=True)
class Dataset:
    """Images in ``[0, 1]`` with shape ``(N, H, W, C)`` plus integer labels.

    ``domains`` is ``None`` when the source has no domain information.
    """

    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    class_names: tuple[str, ...] = ()
    domains: np.ndarray | None = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError(f"{labels.shape[0]} labels for {images.shape[0]} images")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        names = tuple(self.class_names) or tuple(f"class_{i}" for i in range(self.n_classes))
        if len(names) != self.n_classes:
            raise ValueError(f"{len(names)} class names for {self.n_classes} classes")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", names)
        if self.domains is not None:
            domains = np.asarray(self.domains, dtype=np.int64)
            if domains.shape != labels.shape:
                raise ValueError("domains must align with labels")
            object.__setattr__(self, "domains", domains)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.labels[index], self.n_classes, self.class_names,
                       None if self.domains is None else self.domains[index])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        if self.domains is not None:
            h.update(self.domains.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class Task:
    train: Dataset
    test: Dataset
    class_ids: frozenset[int]
    domain_ids: frozenset[int] = frozenset()


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[Task, ...]
    mode: StreamMode
    class_order: tuple[int, ...]
    seed: int = 0
    train_index: tuple[np.ndarray, ...] = field(default=(), repr=False, compare=False)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i) -> Task:
        return self.tasks[i]

    def digest(self) -> str:
        h = hashlib.sha256(f"{self.mode.value}:{self.class_order}".encode())
        for t in self.tasks:
            h.update(t.train.digest().encode())
            h.update(t.test.digest().encode())
        return h.hexdigest()


def _split_per_class(labels: np.ndarray, classes, train_fraction: float, seed: int):
    train, test = [], []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        idx = np.random.default_rng([seed, int(c)]).permutation(idx)
        n_train = int(round(train_fraction * idx.size))
        train.append(np.sort(idx[:n_train]))
        test.append(np.sort(idx[n_train:]))
    return train, test


def make_class_incremental_stream(ds: Dataset, n_tasks: int, class_order: Sequence[int] | None = None,
                                  seed: int = 0, train_fraction: float = 0.8,
                                  test_ds: Dataset | None = None) -> TaskStream:
    """Split ``ds`` into ``n_tasks`` tasks with disjoint, equally sized class sets.

    Classes are assigned to tasks in ``class_order`` (identity by default).
    Each class is split into train/test items by a seeded permutation unless a
    separate ``test_ds`` is supplied.
    """
    k = ds.n_classes
    if n_tasks < 1 or k % n_tasks:
        raise ValueError(f"{k} classes cannot be split evenly into {n_tasks} tasks")
    order = list(range(k)) if class_order is None else [int(c) for c in class_order]
    if len(set(order)) != len(order):
        raise ValueError("class_order contains a duplicate class")
    if sorted(order) != list(range(k)):
        raise ValueError(f"class_order must be a permutation of range({k})")
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError("train_fraction must lie in (0, 1]")
    per = k // n_tasks
    tasks, train_index = [], []
    for t in range(n_tasks):
        classes = order[t * per:(t + 1) * per]
        if test_ds is None:
            tr, te = _split_per_class(ds.labels, classes, train_fraction, seed)
            tr_idx, te_idx = np.concatenate(tr), np.concatenate(te)
            test = ds.subset(te_idx)
        else:
            tr_idx = np.flatnonzero(np.isin(ds.labels, classes))
            test = test_ds.subset(np.flatnonzero(np.isin(test_ds.labels, classes)))
        train_index.append(tr_idx)
        domains = frozenset() if ds.domains is None else frozenset(np.unique(ds.domains[tr_idx]).tolist())
        tasks.append(Task(ds.subset(tr_idx), test, frozenset(classes), domains))
    return TaskStream(tuple(tasks), StreamMode.CLASS_INCREMENTAL, tuple(order), seed, tuple(train_index))


def make_domain_incremental_stream(ds: Dataset, train_domains: Sequence[int],
                                   test_domains: Sequence[int], seed: int = 0) -> TaskStream:
    """One task per training domain; every task shares a single fixed test set."""
    if ds.domains is None:
        raise ValueError("dataset carries no domain ids")
    train_domains, test_domains = [int(d) for d in train_domains], [int(d) for d in test_domains]
    if set(train_domains) & set(test_domains):
        raise ValueError("train and test domains overlap")
    if not train_domains or not test_domains:
        raise ValueError("need at least one train and one test domain")
    all_classes = frozenset(range(ds.n_classes))
    test_idx = np.flatnonzero(np.isin(ds.domains, test_domains))
    test = ds.subset(test_idx)
    tasks, train_index = [], []
    for d in train_domains:
        idx = np.flatnonzero(ds.domains == d)
        present = set(np.unique(ds.labels[idx]).tolist())
        missing = sorted(all_classes - present)
        if missing:
            raise ValueError(f"classes {missing} missing from train domain {d}")
        train_index.append(idx)
        tasks.append(Task(ds.subset(idx), test, all_classes, frozenset([d])))
    return TaskStream(tuple(tasks), StreamMode.DOMAIN_INCREMENTAL, tuple(range(ds.n_classes)),
                      seed, tuple(train_index))


# -- manifest --------------------------------------------------------------

def load_manifest(path) -> Dataset:
    """Read a ``path,label[,domain]`` CSV; image paths are relative to the manifest."""
    from PIL import Image

    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"{path}: empty manifest")
        header = [h.strip() for h in header]
        if header not in (["path", "label"], ["path", "label", "domain"]):
            raise ManifestError(f"{path}: header must be path,label[,domain], got {','.join(header)}")
        has_domain = len(header) == 3
        images, labels, domains = [], [], []
        shape = None
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ManifestError(f"{path}: row {row_no}: expected {len(header)} columns, got {len(row)}")
            try:
                label = int(row[1])
                domain = int(row[2]) if has_domain else None
            except ValueError:
                raise ManifestError(f"{path}: row {row_no}: non-integer label/domain") from None
            if label < 0:
                raise ManifestError(f"{path}: row {row_no}: negative label")
            img_path = path.parent / row[0].strip()
            if not img_path.is_file():
                raise ManifestError(f"{path}: row {row_no}: image not found: {row[0]}")
            with Image.open(img_path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ManifestError(f"{path}: row {row_no}: image shape {arr.shape} differs from {shape}")
            images.append(arr)
            labels.append(label)
            domains.append(domain)
    if not images:
        raise ManifestError(f"{path}: manifest has no rows")
    labels = np.asarray(labels, dtype=np.int64)
    return Dataset(np.stack(images), labels, int(labels.max()) + 1,
                   domains=np.asarray(domains, dtype=np.int64) if has_domain else None)


def write_manifest(ds: Dataset, directory, name: str = "manifest.csv") -> Path:
    """Write ``ds`` as PNG files plus a manifest; images are quantised to 8 bits."""
    from PIL import Image

    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    out = directory / name
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "domain"] if ds.domains is not None else ["path", "label"])
        for i in range(len(ds)):
            rel = f"images/{i:06d}.png"
            pix = np.clip(np.rint(ds.images[i] * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(pix if pix.shape[2] == 3 else pix[..., 0]).save(directory / rel)
            row = [rel, int(ds.labels[i])]
            if ds.domains is not None:
                row.append(int(ds.domains[i]))
            writer.writerow(row)
    return out


# -- synthetic generators -----------------------------------------------------

def _render_basis(latent_dim: int, image_size: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random patterns, one per latent coordinate: Gaussian bumps times colours."""
    yy, xx = np.mgrid[0:image_size, 0:image_size] / max(image_size - 1, 1)
    basis = np.empty((latent_dim, image_size, image_size, channels))
    for j in range(latent_dim):
        cy, cx = rng.uniform(0.0, 1.0, size=2)
        width = rng.uniform(0.15, 0.4)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        freq = rng.uniform(1.0, 3.0)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.cos(2 * np.pi * freq * (xx * np.cos(phase) + yy * np.sin(phase)) + phase)
        colour = rng.normal(0.0, 1.0, size=channels)
        basis[j] = (bump * (0.6 + 0.4 * wave))[..., None] * colour
    return basis


def _render(latents: np.ndarray, basis: np.ndarray) -> np.ndarray:
    logits = np.tensordot(latents, basis, axes=(1, 0))
    return (1.0 / (1.0 + np.exp(-logits))).astype(np.float32)


def make_split_blobs(n_classes: int = 10, per_class: int = 100, image_size: int = 16,
                     channels: int = 3, latent_dim: int = 8, separation: float = 2.0,
                     noise: float = 1.0, modes_per_class: int = 1, seed: int = 0) -> Dataset:
    """Gaussian class clusters in a latent space, rendered as tiny images.

    Each class owns ``modes_per_class`` cluster centres; more modes and more
    noise give larger intra-class variation (the "hard" stream).
    """
    rng = np.random.default_rng(seed)
    basis = _render_basis(latent_dim, image_size, channels, rng)
    centres = rng.normal(0.0, separation, size=(n_classes, modes_per_class, latent_dim))
    labels = np.repeat(np.arange(n_classes), per_class)
    modes = rng.integers(0, modes_per_class, size=labels.size)
    latents = centres[labels, modes] + rng.normal(0.0, noise, size=(labels.size, latent_dim))
    return Dataset(_render(latents, basis), labels, n_classes)


def make_domain_blobs(n_classes: int = 5, per_class: int = 40, angles: Sequence[float] = (0.0, 30.0, 60.0),
                      colour_shifts: Sequence[float] | None = None, image_size: int = 16,
                      channels: int = 3, latent_dim: int = 8, separation: float = 2.0,
                      noise: float = 1.0, seed: int = 0) -> Dataset:
    """Blob classes observed under several domains.

    Domain ``d`` draws fresh samples, rotates them by ``angles[d]`` degrees and
    adds ``colour_shifts[d]`` to the red channel (and subtracts it from blue).
    """
    rng = np.random.default_rng(seed)
    basis = _render_basis(latent_dim, image_size, channels, rng)
    centres = rng.normal(0.0, separation, size=(n_classes, latent_dim))
    shifts = list(colour_shifts) if colour_shifts is not None else [0.0] * len(angles)
    if len(shifts) != len(angles):
        raise ValueError("colour_shifts must match angles")
    images, labels, domains = [], [], []
    for d, (angle, shift) in enumerate(zip(angles, shifts)):
        lab = np.repeat(np.arange(n_classes), per_class)
        lat = centres[lab] + rng.normal(0.0, noise, size=(lab.size, latent_dim))
        imgs = _render(lat, basis)
        if angle:
            imgs = ndimage.rotate(imgs, angle, axes=(1, 2), reshape=False, mode="nearest", order=1)
        if shift:
            imgs[..., 0] += shift
            imgs[..., -1] -= shift
        images.append(np.clip(imgs, 0.0, 1.0))
        labels.append(lab)
        domains.append(np.full(lab.size, d))
    return Dataset(np.concatenate(images), np.concatenate(labels), n_classes,
                   domains=np.concatenate(domains))
