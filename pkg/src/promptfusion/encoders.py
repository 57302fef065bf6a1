"""Frozen toy transformers with prompt insertion points.

Both encoders are small pre-LN transformers initialised from a fixed seed and
never trained. Prompts enter as extra tokens: visual prompts after the class
token (shallow insertion, first layer only) and text context vectors before
the class-name embedding.
"""
from __future__ import annotations

import hashlib

import numpy as np

from . import gradcore as gc
from .gradcore import Value


def _frozen(rng: np.random.Generator, shape, std: float, dtype) -> Value:
    return Value(rng.normal(0.0, std, size=shape).astype(dtype))


def _zeros(shape, dtype) -> Value:
    return Value(np.zeros(shape, dtype=dtype))


def _ones(shape, dtype) -> Value:
    return Value(np.ones(shape, dtype=dtype))


class TransformerBlock:
    """Pre-LN block: x + MHA(LN(x)), then x + MLP(LN(x)) with a tanh MLP."""

    def __init__(self, width: int, n_heads: int, rng: np.random.Generator,
                 mlp_ratio: int = 4, dtype=np.float32):
        if width % n_heads:
            raise ValueError(f"width {width} not divisible by {n_heads} heads")
        self.width, self.n_heads = width, n_heads
        s = width ** -0.5
        hidden = mlp_ratio * width
        self.params = {
            "ln1_g": _ones(width, dtype), "ln1_b": _zeros(width, dtype),
            "wq": _frozen(rng, (width, width), s, dtype), "bq": _zeros(width, dtype),
            "wk": _frozen(rng, (width, width), s, dtype), "bk": _zeros(width, dtype),
            "wv": _frozen(rng, (width, width), s, dtype), "bv": _zeros(width, dtype),
            "wo": _frozen(rng, (width, width), s, dtype), "bo": _zeros(width, dtype),
            "ln2_g": _ones(width, dtype), "ln2_b": _zeros(width, dtype),
            "w1": _frozen(rng, (width, hidden), s, dtype), "b1": _zeros(hidden, dtype),
            "w2": _frozen(rng, (hidden, width), hidden ** -0.5, dtype), "b2": _zeros(width, dtype),
        }

    def _heads(self, x: Value, n: int, b: int) -> Value:
        d = self.width // self.n_heads
        return x.reshape(b, n, self.n_heads, d).transpose(0, 2, 1, 3)

    def __call__(self, x: Value) -> Value:
        p = self.params
        b, n, e = x.shape
        h = gc.layer_norm(x, p["ln1_g"], p["ln1_b"])
        q = self._heads(h @ p["wq"] + p["bq"], n, b)
        k = self._heads(h @ p["wk"] + p["bk"], n, b)
        v = self._heads(h @ p["wv"] + p["bv"], n, b)
        a = gc.attention(q, k, v).transpose(0, 2, 1, 3).reshape(b, n, e)
        x = x + (a @ p["wo"] + p["bo"])
        h = gc.layer_norm(x, p["ln2_g"], p["ln2_b"])
        return x + (gc.tanh(h @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"])


class _Frozen:
    """Shared bookkeeping for frozen modules: named weights and a checksum."""

    def named_weights(self) -> dict[str, Value]:
        raise NotImplementedError

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, w in sorted(self.named_weights().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(w.data).tobytes())
        return h.hexdigest()


def patchify_array(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Cut ``(B, H, W, C)`` images into row-major ``(B, m, P*P*C)`` patch vectors."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    b, hgt, wid, c = images.shape
    if hgt % patch_size or wid % patch_size:
        raise ValueError(f"image sides {hgt}x{wid} not divisible by patch size {patch_size}")
    gh, gw = hgt // patch_size, wid // patch_size
    x = images.reshape(b, gh, patch_size, gw, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch_size * patch_size * c)


class VisionEncoder(_Frozen):
    """ViT-style encoder; the pooled feature is the final class-token state."""

    def __init__(self, image_size: int = 16, patch_size: int = 4, channels: int = 3,
                 width: int = 32, n_layers: int = 2, n_heads: int = 4,
                 out_dim: int | None = None, seed: int = 0, pixel_mean: float = 0.5,
                 pixel_std: float = 0.25, dtype=np.float32):
        if image_size % patch_size:
            raise ValueError(f"image size {image_size} not divisible by patch size {patch_size}")
        rng = np.random.default_rng(seed)
        self.image_size, self.patch_size, self.channels = image_size, patch_size, channels
        self.width, self.n_layers, self.dtype = width, n_layers, dtype
        self.pixel_mean, self.pixel_std = pixel_mean, pixel_std
        self.n_patches = (image_size // patch_size) ** 2
        patch_dim = patch_size * patch_size * channels
        self.patch_w = _frozen(rng, (patch_dim, width), patch_dim ** -0.5, dtype)
        self.patch_b = _frozen(rng, (width,), 0.02, dtype)
        self.cls_token = _frozen(rng, (width,), 0.02, dtype)
        self.pos_embed = _frozen(rng, (1 + self.n_patches, width), 0.02, dtype)
        self.blocks = [TransformerBlock(width, n_heads, rng, dtype=dtype) for _ in range(n_layers)]
        self.ln_post_g, self.ln_post_b = _ones(width, dtype), _zeros(width, dtype)
        self.out_dim = out_dim or width
        self.proj = _frozen(rng, (width, out_dim), width ** -0.5, dtype) if out_dim and out_dim != width else None

    def named_weights(self) -> dict[str, Value]:
        out = {"patch_w": self.patch_w, "patch_b": self.patch_b, "cls_token": self.cls_token,
               "pos_embed": self.pos_embed, "ln_post_g": self.ln_post_g, "ln_post_b": self.ln_post_b}
        if self.proj is not None:
            out["proj"] = self.proj
        for i, blk in enumerate(self.blocks):
            out.update({f"block{i}.{k}": v for k, v in blk.params.items()})
        return out

    def patchify(self, images: np.ndarray) -> Value:
        """Linearly project each patch to the encoder width; no positions yet."""
        patches = patchify_array(np.asarray(images, dtype=self.dtype), self.patch_size)
        if patches.shape[1] != self.n_patches:
            raise ValueError(f"expected {self.n_patches} patches, got {patches.shape[1]}")
        return Value(patches) @ self.patch_w + self.patch_b

    def insert_visual_prompts(self, tokens: Value, prompts: Value | None = None) -> Value:
        """Build ``[CLS] [U_1..U_p] [I_1..I_m]``.

        Positional embeddings go on the class token and the patches only, so
        an empty prompt reproduces the plain encoder input.
        """
        b = tokens.shape[0]
        pos = self.pos_embed
        cls = gc.reshape(self.cls_token + pos[0], (1, 1, self.width))
        parts = [gc.mul(cls, np.ones((b, 1, 1), dtype=self.dtype))]
        if prompts is not None and prompts.shape[0] > 0:
            if prompts.ndim != 2 or prompts.shape[1] != self.width:
                raise gc.ShapeError(f"visual prompts {prompts.shape} do not match width {self.width}")
            parts.append(gc.mul(gc.reshape(prompts, (1,) + prompts.shape),
                                np.ones((b, 1, 1), dtype=self.dtype)))
        parts.append(tokens + pos[1:])
        return gc.concat(parts, axis=1)

    def encode_sequence(self, seq: Value) -> tuple[Value, Value]:
        """Run the blocks; return ``(pooled, token_features)``."""
        x = seq
        for blk in self.blocks:
            x = blk(x)
        pooled = gc.layer_norm(x[:, 0], self.ln_post_g, self.ln_post_b)
        if self.proj is not None:
            pooled = pooled @ self.proj
        return pooled, x

    def normalize(self, images: np.ndarray) -> np.ndarray:
        return (np.asarray(images, dtype=self.dtype) - self.pixel_mean) / self.pixel_std

    def encode_image(self, images: np.ndarray, prompts: Value | None = None) -> Value:
        """Pooled feature of normalised images with optional visual prompts."""
        tokens = self.patchify(self.normalize(images))
        return self.encode_sequence(self.insert_visual_prompts(tokens, prompts))[0]

    def gate_feature(self, images: np.ndarray) -> np.ndarray:
        """Prompt-free pooled feature, detached from any graph."""
        with gc.no_grad():
            return self.encode_image(images).data.copy()


class TextEncoder(_Frozen):
    """Encodes ``[V_1..V_M][class-embedding]`` and pools the last position.

    A frozen embedding table stands in for tokenised class names.
    """

    def __init__(self, n_classes: int, width: int = 32, n_layers: int = 2, n_heads: int = 4,
                 max_context: int = 64, out_dim: int | None = None, seed: int = 1,
                 dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.n_classes, self.width, self.max_context, self.dtype = n_classes, width, max_context, dtype
        self.class_embed = _frozen(rng, (n_classes, width), 0.02, dtype)
        self.pos_embed = _frozen(rng, (max_context + 1, width), 0.02, dtype)
        self.blocks = [TransformerBlock(width, n_heads, rng, dtype=dtype) for _ in range(n_layers)]
        self.ln_final_g, self.ln_final_b = _ones(width, dtype), _zeros(width, dtype)
        self.out_dim = out_dim or width
        self.proj = _frozen(rng, (width, out_dim), width ** -0.5, dtype) if out_dim and out_dim != width else None

    def named_weights(self) -> dict[str, Value]:
        out = {"class_embed": self.class_embed, "pos_embed": self.pos_embed,
               "ln_final_g": self.ln_final_g, "ln_final_b": self.ln_final_b}
        if self.proj is not None:
            out["proj"] = self.proj
        for i, blk in enumerate(self.blocks):
            out.update({f"block{i}.{k}": v for k, v in blk.params.items()})
        return out

    def encode_text(self, context: Value, class_ids) -> Value:
        """Features ``g(P_k)`` for a batch of classes.

        ``context`` is ``(M, e)`` shared by all classes or ``(K, M, e)`` with one
        context per class; ``class_ids`` has length K.
        """
        ids = np.atleast_1d(np.asarray(class_ids, dtype=np.int64))
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_classes):
            raise ValueError(f"unknown class id in {ids.tolist()} (table has {self.n_classes})")
        k = ids.size
        context = gc.as_value(context)
        if context.ndim == 2:
            context = gc.mul(gc.reshape(context, (1,) + context.shape), np.ones((k, 1, 1), dtype=self.dtype))
        if context.shape[0] != k or context.shape[2] != self.width:
            raise gc.ShapeError(f"text context {context.shape} for {k} classes of width {self.width}")
        m = context.shape[1]
        if m > self.max_context:
            raise gc.ShapeError(f"context length {m} exceeds {self.max_context}")
        cls = gc.reshape(self.class_embed[ids], (k, 1, self.width))
        x = gc.concat([context, cls], axis=1) + self.pos_embed[: m + 1]
        for blk in self.blocks:
            x = blk(x)
        pooled = gc.layer_norm(x[:, m], self.ln_final_g, self.ln_final_b)
        if self.proj is not None:
            pooled = pooled @ self.proj
        return pooled
