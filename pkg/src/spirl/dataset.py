"""SPFR frame datasets.

Layout (little-endian)::

    b"SPFR"  u32 version  u64 count  u32 h  u32 w  u32 c
    count x (h*w*c) uint8, row-major RGB
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SPFR"
VERSION = 1
_HEADER = struct.Struct("<4sIQIII")


class DatasetError(ValueError):
    pass


def write_frames(path: str | os.PathLike, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.dtype != np.uint8:
        raise DatasetError(f"expected uint8 frames (n, h, w, c), got {frames.dtype} {frames.shape}")
    n, h, w, c = frames.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, h, w, c))
        fh.write(np.ascontiguousarray(frames).tobytes())
    os.replace(tmp, path)


def read_frames_raw(path: str | os.PathLike) -> np.ndarray:
    """The stored uint8 frames, shape (n, h, w, c)."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise DatasetError(f"{path}: truncated header")
        magic, version, n, h, w, c = _HEADER.unpack(head)
        if magic != MAGIC:
            raise DatasetError(f"{path}: not an SPFR dataset")
        if version != VERSION:
            raise DatasetError(f"{path}: unsupported SPFR version {version}")
        body = fh.read()
    if len(body) != n * h * w * c:
        raise DatasetError(f"{path}: expected {n * h * w * c} frame bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(n, h, w, c)


def load_frames(path: str | os.PathLike, dtype=np.float32) -> np.ndarray:
    """Frames scaled from [0, 255] to [0, 1]."""
    return read_frames_raw(path).astype(dtype) / dtype(255.0)


def channel_stats(frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population std over every pixel of every frame."""
    flat = np.asarray(frames, dtype=np.float64).reshape(-1, np.shape(frames)[-1])
    return flat.mean(axis=0), flat.std(axis=0)
