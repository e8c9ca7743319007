"""Binary PPM output and the small set of renderings the CLI produces."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

# heatmap ramp: low errors dark blue, middle green, high yellow
HEATMAP_ANCHORS = np.array([[16, 24, 96], [32, 168, 72], [248, 232, 40]], dtype=np.float64)

SELECTED_COLOR = (230, 40, 40)
ATTENDED_COLOR = (40, 220, 240)
BOTH_COLOR = (255, 240, 0)


def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"expected uint8 (h, w, 3), got {img.dtype} {img.shape}")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    # four header tokens, then exactly one whitespace byte before the raster
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise ValueError(f"{path}: not a maxval-255 P6 image")
    w, h = int(tokens[1]), int(tokens[2])
    raster = data[pos + 1:pos + 1 + w * h * 3]
    if len(raster) != w * h * 3:
        raise ValueError(f"{path}: truncated raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)


def to_uint8(frame: np.ndarray) -> np.ndarray:
    """[0, 1] floats or uint8 to uint8, rounding half up."""
    frame = np.asarray(frame)
    if frame.dtype == np.uint8:
        return frame
    return np.floor(np.clip(frame, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def upscale(image: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(image, factor, axis=0), factor, axis=1)


def heatmap(errors: np.ndarray, patch: int = 8) -> np.ndarray:
    """Error grid (P, P) to an RGB image with one ``patch x patch`` block per cell.

    Values are scaled by the map maximum; an all-zero map renders at the low anchor.
    """
    e = np.asarray(errors, dtype=np.float64)
    top = e.max()
    t = e / top if top > 0 else np.zeros_like(e)
    seg = np.minimum((t * 2).astype(int), 1)
    frac = (t * 2 - seg)[..., None]
    rgb = HEATMAP_ANCHORS[seg] * (1 - frac) + HEATMAP_ANCHORS[seg + 1] * frac
    return upscale(np.floor(rgb + 0.5).astype(np.uint8), patch)


def _outline(img: np.ndarray, idx: int, P: int, p: int, color, width: int = 1) -> None:
    i, j = divmod(int(idx), P)
    y0, x0 = i * p, j * p
    y1, x1 = y0 + p, x0 + p
    img[y0:y0 + width, x0:x1] = color
    img[y1 - width:y1, x0:x1] = color
    img[y0:y1, x0:x0 + width] = color
    img[y0:y1, x1 - width:x1] = color


def selection_overlay(frame: np.ndarray, indices, p: int = 8) -> np.ndarray:
    """Outline the given raster patch indices on a copy of the frame."""
    img = to_uint8(frame).copy()
    P = img.shape[0] // p
    for idx in indices:
        _outline(img, idx, P, p, SELECTED_COLOR)
    return img


def attention_overlay(frame: np.ndarray, selected, attended, p: int = 8) -> np.ndarray:
    """Selected-only patches in red, attended-only in cyan, both in a thick yellow outline."""
    img = to_uint8(frame).copy()
    P = img.shape[0] // p
    sel, att = set(int(i) for i in selected), set(int(i) for i in attended)
    for idx in sorted(sel - att):
        _outline(img, idx, P, p, SELECTED_COLOR)
    for idx in sorted(att - sel):
        _outline(img, idx, P, p, ATTENDED_COLOR)
    for idx in sorted(sel & att):
        _outline(img, idx, P, p, BOTH_COLOR, width=2)
    return img
