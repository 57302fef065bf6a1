"""Contrastive text-prompt head: the stability branch.

One set of context prompts is added per task and frozen when the next task
begins. Images are matched to class text features by cosine similarity, with
optional image prompts inserted among the patch tokens.
"""
from __future__ import annotations

import hashlib

import numpy as np

from . import gradcore as gc
from .encoders import TextEncoder, VisionEncoder
from .gradcore import Value


class StabilizerPromptBank:
    """Per-task text prompt tensors plus shared image prompts.

    In domain-incremental mode classes repeat across tasks, so each task adds
    a prompt set over the same classes instead of new ones.
    """

    def __init__(self, context_length: int, text_width: int, image_prompt_length: int,
                 image_width: int, temperature: float = 0.07, init_std: float = 0.02,
                 domain_incremental: bool = False, seed: int = 0, dtype=np.float32):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.context_length = context_length
        self.text_width = text_width
        self.temperature = float(temperature)
        self.init_std = init_std
        self.domain_incremental = domain_incremental
        self.seed = seed
        self.dtype = dtype
        self.prompts: list[Value] = []
        self.task_classes: list[np.ndarray] = []
        self.frozen: list[bool] = []
        rng = np.random.default_rng([seed, 0x1A6E])
        self.image_prompts = Value(
            rng.normal(0.0, init_std, size=(image_prompt_length, image_width)).astype(dtype),
            requires_grad=image_prompt_length > 0, name="stabilizer.image_prompts")

    @property
    def n_tasks(self) -> int:
        return len(self.prompts)

    @property
    def classes_seen(self) -> list[int]:
        seen: list[int] = []
        for cls in self.task_classes:
            seen.extend(c for c in cls.tolist() if c not in seen)
        return seen

    def begin_task(self, task_classes) -> Value:
        task_classes = np.asarray(list(task_classes), dtype=np.int64)
        if task_classes.size == 0:
            raise ValueError("a task needs at least one class")
        if not self.domain_incremental:
            overlap = set(task_classes.tolist()) & set(self.classes_seen)
            if overlap:
                raise ValueError(f"classes {sorted(overlap)} already owned by an earlier task")
        for i in range(len(self.prompts)):
            self.freeze(i)
        t = len(self.prompts)
        rng = np.random.default_rng([self.seed, 0x57AB, t])
        p = Value(rng.normal(0.0, self.init_std,
                             size=(task_classes.size, self.context_length, self.text_width)).astype(self.dtype),
                  requires_grad=True, name=f"stabilizer.prompts.{t}")
        self.prompts.append(p)
        self.task_classes.append(task_classes)
        self.frozen.append(False)
        return p

    def freeze(self, t: int) -> None:
        self.frozen[t] = True
        self.prompts[t].requires_grad = False
        self.prompts[t].grad = None

    def current(self) -> Value:
        if not self.prompts:
            raise RuntimeError("no task has begun")
        return self.prompts[-1]

    def concat_bank(self) -> Value:
        """All prompt rows in task-arrival order."""
        if not self.prompts:
            raise RuntimeError("no task has begun")
        return gc.concat(self.prompts, axis=0) if len(self.prompts) > 1 else self.prompts[0]

    def row_classes(self) -> np.ndarray:
        return np.concatenate(self.task_classes) if self.task_classes else np.zeros(0, np.int64)

    def checksum(self, t: int) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.prompts[t].data).tobytes()).hexdigest()

    def trainable(self) -> list[Value]:
        out = [p for p, f in zip(self.prompts, self.frozen) if not f and p.requires_grad]
        if self.image_prompts.requires_grad:
            out.append(self.image_prompts)
        return out


class Stabilizer:
    """Branch S: logits ``cos(g(P_k), f(x~)) / T`` over the classes seen so far."""

    def __init__(self, vision: VisionEncoder, text: TextEncoder, bank: StabilizerPromptBank):
        if vision.out_dim != text.out_dim:
            raise ValueError(f"image feature dim {vision.out_dim} != text feature dim {text.out_dim}")
        self.vision, self.text, self.bank = vision, text, bank
        self._frozen_cache: dict[int, np.ndarray] = {}

    def begin_task(self, task_classes) -> Value:
        return self.bank.begin_task(task_classes)

    def classes(self) -> list[int]:
        """Class ids in logit order."""
        return self.bank.classes_seen

    def text_features(self) -> Value:
        """``g(P_k)`` for every prompt row; frozen sets are cached."""
        parts = []
        for t, (p, cls) in enumerate(zip(self.bank.prompts, self.bank.task_classes)):
            if self.bank.frozen[t]:
                if t not in self._frozen_cache:
                    with gc.no_grad():
                        self._frozen_cache[t] = self.text.encode_text(p, cls).data
                parts.append(Value(self._frozen_cache[t]))
            else:
                parts.append(self.text.encode_text(p, cls))
        return gc.concat(parts, axis=0) if len(parts) > 1 else parts[0]

    def image_features(self, images: np.ndarray) -> Value:
        prompts = self.bank.image_prompts if self.bank.image_prompts.shape[0] else None
        return self.vision.encode_image(images, prompts)

    def similarities(self, image_features: Value, text_features: Value | None = None) -> Value:
        """Cosine similarities reduced to one column per seen class."""
        tf = self.text_features() if text_features is None else text_features
        sims = gc.cosine_matrix(image_features, tf)
        if not self.bank.domain_incremental or self.bank.n_tasks == 1:
            return sims
        rows = self.bank.row_classes()
        cols = []
        for c in self.classes():
            idx = np.flatnonzero(rows == c)
            cols.append(gc.reshape(gc.max(sims[:, idx], axis=1), (-1, 1)))
        return gc.concat(cols, axis=1)

    def logits(self, images: np.ndarray | None = None, image_features: Value | None = None) -> Value:
        if self.bank.n_tasks == 0:
            raise RuntimeError("stabilizer has no prompts yet")
        feats = self.image_features(images) if image_features is None else image_features
        return self.similarities(feats) / self.bank.temperature

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Argmax class id; exact ties go to the lowest id."""
        with gc.no_grad():
            sims = self.similarities(self.image_features(images)).data
        return argmax_lowest_id(sims, self.classes())


def argmax_lowest_id(scores: np.ndarray, class_ids) -> np.ndarray:
    ids = np.asarray(class_ids)
    best = scores.max(axis=1, keepdims=True)
    masked = np.where(scores == best, ids[None, :], np.iinfo(np.int64).max)
    return masked.min(axis=1)
