"""NNCK1 parameter checkpoints.

Layout (little-endian)::

    b"NNCK1"
    u32 n_tensors
    n_tensors x { u32 name_len, utf-8 name, u32 ndim, ndim x u32 dim, prod(dim) x f32 }
    u32 meta_len, utf-8 JSON metadata (variant tag, config block; may be "{}")
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"NNCK1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Mapping[str, "np.ndarray | object"], meta: dict | None = None) -> None:
    chunks = [MAGIC, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = params[name]
        arr = np.asarray(getattr(arr, "data", arr), dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(blob)))
    chunks.append(blob)
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not an NNCK1 checkpoint")
    off = len(MAGIC)

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, buf, off)
        off += struct.calcsize(fmt)
        return vals

    try:
        (n,) = take("<I")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n):
            (ln,) = take("<I")
            name = buf[off:off + ln].decode("utf-8")
            off += ln
            (ndim,) = take("<I")
            shape = take(f"<{ndim}I")
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            tensors[name] = arr.astype(np.float64)
        (ml,) = take("<I")
        meta = json.loads(buf[off:off + ml].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    return tensors, meta


def load_into(params: Mapping[str, object], tensors: Mapping[str, np.ndarray]) -> None:
    """Copy checkpoint tensors into model parameters, validating names and shapes."""
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise CheckpointError(f"parameter name mismatch: missing={missing} unexpected={extra}")
    for name, p in params.items():
        src = tensors[name]
        if tuple(src.shape) != tuple(p.data.shape):
            raise CheckpointError(f"shape mismatch for {name!r}: checkpoint {src.shape} vs model {p.data.shape}")
        p.data = np.array(src, dtype=np.float64)
