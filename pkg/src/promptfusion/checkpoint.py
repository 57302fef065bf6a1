"""Checkpoint directories: a JSON manifest plus one raw float32 blob per tensor.

Blob layout (all little-endian): ``uint32 ndim``, ``ndim`` x ``uint32`` dims,
then the ``float32`` payload in C order.
"""
from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def write_blob(path, array) -> None:
    a = np.asarray(array)
    if a.dtype != np.float32 and not np.array_equal(a.astype(np.float32), a):
        raise CheckpointError(f"{path}: tensor is not exactly representable as float32")
    a = np.asarray(a, dtype=_LE_F32, order="C")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes(order="C"))


def read_blob(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise CheckpointError(f"{path}: truncated header")
    (ndim,) = struct.unpack_from("<I", raw, 0)
    head = 4 + 4 * ndim
    shape = struct.unpack_from(f"<{ndim}I", raw, 4)
    count = int(np.prod(shape)) if ndim else 1
    if len(raw) != head + 4 * count:
        raise CheckpointError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(raw, dtype=_LE_F32, offset=head, count=count).reshape(shape).astype(np.float32)


def _blob_name(i: int, name: str) -> str:
    return f"{i:04d}_{re.sub(r'[^A-Za-z0-9_.-]+', '_', name)}.bin"


def save(directory, tensors: dict[str, np.ndarray], *, config_hash: str, task_index: int,
         meta: dict | None = None) -> Path:
    """Write ``tensors`` and a manifest; ``meta`` must be JSON-serialisable."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for i, name in enumerate(sorted(tensors)):
        fname = _blob_name(i, name)
        write_blob(directory / fname, tensors[name])
        entries[name] = {"file": fname, "shape": list(np.shape(tensors[name]))}
    manifest = {"schema_version": SCHEMA_VERSION, "config_hash": config_hash,
                "task_index": int(task_index), "tensors": entries, "meta": meta or {}}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def load(directory, expected_hash: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(manifest, tensors)``; rejects unknown schemas and hash mismatches."""
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise CheckpointError(f"{directory}: no {MANIFEST}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema {manifest.get('schema_version')!r}")
    if expected_hash is not None and manifest["config_hash"] != expected_hash:
        raise CheckpointError("checkpoint was written by a different configuration "
                              f"({manifest['config_hash'][:12]} != {expected_hash[:12]})")
    tensors = {}
    for name, entry in manifest["tensors"].items():
        a = read_blob(directory / entry["file"])
        if list(a.shape) != entry["shape"]:
            raise CheckpointError(f"{name}: blob shape {a.shape} != manifest {entry['shape']}")
        tensors[name] = a
    return manifest, tensors
