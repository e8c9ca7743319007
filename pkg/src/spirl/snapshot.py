"""SPNT parameter snapshots.

Layout (all integers little-endian)::

    b"SPNT"  u32 version
    repeated until EOF:
        u32 name_length, name (UTF-8)
        u32 rank, rank x u64 dims
        prod(dims) x f32 (little-endian, row-major)
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"SPNT"
VERSION = 1

__all__ = ["SnapshotError", "save_snapshot", "load_snapshot", "write_snapshot", "read_snapshot"]


class SnapshotError(ValueError):
    pass


def write_snapshot(fh: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<I", VERSION))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_snapshot(fh: BinaryIO) -> dict[str, np.ndarray]:
    if fh.read(4) != MAGIC:
        raise SnapshotError("not an SPNT snapshot (bad magic)")
    (version,) = struct.unpack("<I", _exact(fh, 4))
    if version != VERSION:
        raise SnapshotError(f"unsupported SPNT version {version}")
    out: dict[str, np.ndarray] = {}
    while True:
        head = fh.read(4)
        if not head:
            return out
        if len(head) != 4:
            raise SnapshotError("truncated record header")
        (nlen,) = struct.unpack("<I", head)
        name = _exact(fh, nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", _exact(fh, 4))
        dims = struct.unpack(f"<{rank}Q", _exact(fh, 8 * rank))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(_exact(fh, 4 * count), dtype="<f4").astype(np.float32)
        out[name] = data.reshape(dims)


def _exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise SnapshotError(f"truncated snapshot: wanted {n} bytes, got {len(buf)}")
    return buf


def save_snapshot(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    write_snapshot(buf, tensors)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_snapshot(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_snapshot(fh)
