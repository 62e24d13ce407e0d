"""Binary parameter container.

Layout (all little-endian)::

    b"DSVA"  u32 version  u32 entry_count
    per entry:  u32 name_len  name (utf-8)  u32 ndim  u32 dims[ndim]
    data: float32 values of every entry, in table order, C-contiguous

Hyperparameters travel in a JSON sidecar next to the file (``<file>.json``).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from dsva.core import ValidationError, atomic_write

MAGIC = b"DSVA"
VERSION = 1


class CheckpointError(ValidationError):
    pass


def sidecar_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    header = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    body = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")  # tobytes() is C order; ascontiguousarray would promote 0-d
        raw = name.encode("utf-8")
        header.append(struct.pack("<I", len(raw)) + raw)
        header.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        body.append(arr.tobytes())
    return b"".join(header + body)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError("checkpoint truncated inside the shape table")
        out = struct.unpack_from(fmt, blob, pos)
        pos += size
        return out

    if blob[:4] != MAGIC:
        raise CheckpointError("not a DSVA checkpoint (bad magic bytes)")
    pos = 4
    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    table = []
    for _ in range(count):
        (name_len,) = take("<I")
        if pos + name_len > len(blob):
            raise CheckpointError("checkpoint truncated inside the shape table")
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = take("<I")
        table.append((name, take(f"<{ndim}I")))
    expected = pos + sum(4 * int(np.prod(shape, dtype=np.int64)) for _, shape in table)
    if len(blob) != expected:
        raise CheckpointError(f"checkpoint has {len(blob)} bytes, shape table implies {expected}")
    tensors = {}
    for name, shape in table:
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += 4 * n
    return tensors


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    path = atomic_write(path, encode_tensors(tensors))
    atomic_write(sidecar_path(path), json.dumps(dict(meta or {}), indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    tensors = decode_tensors(path.read_bytes())
    side = sidecar_path(path)
    meta = json.loads(side.read_text(encoding="utf-8")) if side.exists() else {}
    return tensors, meta
