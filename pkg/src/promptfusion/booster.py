"""Visual-prompt head: the plasticity branch.

A single prompt tensor is shared by every task and keeps training, and a
linear head grows by new rows as classes arrive.
"""
from __future__ import annotations

import numpy as np

from . import gradcore as gc
from .encoders import VisionEncoder
from .gradcore import Value


class Booster:
    def __init__(self, vision: VisionEncoder, prompt_length: int, init_std: float = 0.02,
                 seed: int = 0, dtype=np.float32):
        self.vision = vision
        self.dtype = dtype
        rng = np.random.default_rng([seed, 0xB005])
        self.prompts = Value(rng.normal(0.0, init_std, size=(prompt_length, vision.width)).astype(dtype)
                             if prompt_length else np.zeros((0, vision.width), dtype=dtype),
                             requires_grad=prompt_length > 0, name="booster.prompts")
        self.head_w = Value(np.zeros((0, vision.out_dim), dtype=dtype), requires_grad=True, name="booster.head_w")
        self.head_b = Value(np.zeros(0, dtype=dtype), requires_grad=True, name="booster.head_b")
        self.extensions: list[tuple[int, int]] = []
        self.n_evaluated = 0

    @property
    def classes_seen(self) -> int:
        return self.head_w.shape[0]

    @property
    def prompt_tensor_count(self) -> int:
        # one shared tensor for the whole run, never a per-task copy
        return 1

    def extend_head(self, n_new: int) -> None:
        """Append ``n_new`` zero rows; existing rows are copied unchanged."""
        if n_new < 1:
            raise ValueError("head extension needs n_new >= 1")
        start = self.classes_seen
        w = np.concatenate([self.head_w.data, np.zeros((n_new, self.head_w.shape[1]), self.dtype)])
        b = np.concatenate([self.head_b.data, np.zeros(n_new, self.dtype)])
        self.head_w = Value(w, requires_grad=True, name="booster.head_w")
        self.head_b = Value(b, requires_grad=True, name="booster.head_b")
        self.extensions.append((start, start + n_new))

    def features(self, images: np.ndarray) -> Value:
        images = np.asarray(images)
        self.n_evaluated += images.shape[0]
        prompts = self.prompts if self.prompts.shape[0] else None
        return self.vision.encode_image(images, prompts)

    def head(self, features: Value) -> Value:
        if self.classes_seen == 0:
            raise RuntimeError("booster head is empty")
        return features @ self.head_w.T + self.head_b

    def logits(self, images: np.ndarray) -> Value:
        return self.head(self.features(images))

    def trainable(self) -> list[Value]:
        out = [self.head_w, self.head_b]
        if self.prompts.requires_grad:
            out.insert(0, self.prompts)
        return out

    def snapshot_prompts(self) -> np.ndarray:
        return self.prompts.data.copy()

    def prompts_changed(self, snapshot: np.ndarray) -> bool:
        return not np.array_equal(snapshot, self.prompts.data)
