"""Portable binary container for named float64 tensors.

Layout (all integers unsigned 64-bit little-endian):

    magic   7 bytes   b"DASCD1\\n"
    count   u64       number of tensor records
    record, repeated ``count`` times:
        name_len  u64
        name      UTF-8 bytes
        rank      u64
        shape     rank * u64
        data      prod(shape) * f64, IEEE-754 little-endian, row-major

Round trips are bit-exact; record order is preserved.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DASCD1\n"


class CheckpointError(ValueError):
    """File is not a valid tensor container."""


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays to ``path`` in container format."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.astype("<f8").tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a container written by :func:`save_tensors`."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a tensor container")
    offset = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(raw):
            raise CheckpointError(f"{path}: truncated container")
        chunk = raw[offset:offset + n]
        offset += n
        return chunk

    (count,) = struct.unpack("<Q", take(8))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(rank))
        n_items = 1
        for dim in shape:
            n_items *= dim
        data = np.frombuffer(take(n_items * 8), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(shape)
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return tensors
