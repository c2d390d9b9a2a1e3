"""Binary parameter checkpoints.

Layout (little-endian): magic ``QGC1``, u32 version, u32 tensor count, then per
tensor: u32 name byte-length, UTF-8 name, u32 rank, rank x u64 dims, f64 payload.
"""
from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"QGC1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def serialize(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f8", order="C")  # keeps rank 0
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def deserialize(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a QGC1 checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).astype(np.float64)
            off += 8 * size
            out[name] = np.reshape(arr, tuple(dims))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes after {count} tensors")
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> str:
    blob = serialize(tensors)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | Path) -> dict[str, np.ndarray]:
    return deserialize(Path(path).read_bytes())


def tensor_hash(tensors: Mapping[str, np.ndarray]) -> str:
    """sha256 of the serialized form; equal hashes mean bit-identical parameters."""
    return hashlib.sha256(serialize(tensors)).hexdigest()
