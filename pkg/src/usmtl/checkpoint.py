"""Flat little-endian parameter checkpoints.

Layout: b"PMTL1", uint32 count, then per parameter: uint32 name length,
UTF-8 name, uint32 rank, rank x uint64 extents, float64 values (row-major).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data import atomic_write_bytes

MAGIC = b"PMTL1"


def encode_checkpoint(params: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(payload: bytes) -> dict[str, np.ndarray]:
    if payload[: len(MAGIC)] != MAGIC:
        raise ValueError("not a PMTL1 checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(payload):
            raise ValueError("truncated checkpoint")
        vals = struct.unpack_from(fmt, payload, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = take("<I")
        name = payload[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        shape = take(f"<{rank}Q") if rank else ()
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(payload):
            raise ValueError(f"truncated checkpoint in {name}")
        out[name] = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(payload):
        raise ValueError(f"{len(payload) - pos} trailing bytes after checkpoint records")
    return out


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_checkpoint(params))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
