"""Asymmetric masked autoencoder: a small ViT encoder and a wider ViT decoder.

Frames are float arrays in [0, 1] with shape (h, w, c) or (B, h, w, c).  A
frame is cut into ``P x P`` square patches of side ``p`` in raster order;
each patch flattens to ``p*p*c`` values in (row, column, channel) order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad
from .transformer import LN_EPS, TransformerLayerParams, transformer_layer, trunc_normal

NORM_EPS = 1e-6

ProbeMode = Literal["pe_plus_mask", "pe_only", "mask_only"]
PROBE_MODES: tuple[str, ...] = ("pe_plus_mask", "pe_only", "mask_only")


@dataclass(frozen=True)
class FrameSpec:
    h: int = 96
    w: int = 96
    c: int = 3
    p: int = 8

    def __post_init__(self):
        if self.h != self.w:
            raise ValueError(f"frames must be square, got {self.h}x{self.w}")
        if self.h % self.p:
            raise ValueError(f"patch size {self.p} does not divide frame side {self.h}")

    @property
    def P(self) -> int:
        return self.h // self.p

    @property
    def n_patches(self) -> int:
        return self.P * self.P

    @property
    def patch_dim(self) -> int:
        return self.p * self.p * self.c


@dataclass(frozen=True)
class MAEConfig:
    frame: FrameSpec = field(default_factory=FrameSpec)
    enc_dim: int = 64
    enc_depth: int = 3
    enc_heads: int = 4
    dec_dim: int = 128
    dec_depth: int = 3
    dec_heads: int = 8
    mask_ratio: float = 0.75
    mlp_ratio: int = 4

    @classmethod
    def full(cls) -> "MAEConfig":
        return cls()

    @classmethod
    def toy(cls) -> "MAEConfig":
        """48x48 frames (6x6 patches), same widths as the full-size configuration."""
        return cls(frame=FrameSpec(48, 48, 3, 8))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MAEConfig":
        d = dict(d)
        frame = FrameSpec(**d.pop("frame", {}))
        return cls(frame=frame, **d)


# -- patches -------------------------------------------------------------


def patchify(frames: np.ndarray, p: int) -> np.ndarray:
    """(..., h, w, c) -> (..., P*P, p*p*c), raster patch order."""
    frames = np.asarray(frames)
    *lead, h, w, c = frames.shape
    if h != w or h % p:
        raise ValueError(f"cannot cut a {h}x{w} frame into {p}x{p} patches")
    P = h // p
    x = frames.reshape(*lead, P, p, P, p, c)
    x = np.moveaxis(x, -4, -3)  # (..., P, P, p, p, c)
    return x.reshape(*lead, P * P, p * p * c)


def unpatchify(patches: np.ndarray, p: int, c: int = 3) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    patches = np.asarray(patches)
    *lead, n, pd = patches.shape
    P = int(round(np.sqrt(n)))
    if P * P != n or pd != p * p * c:
        raise ValueError(f"{n} patches of width {pd} do not form a square {p}x{p}x{c} grid")
    x = patches.reshape(*lead, P, P, p, p, c)
    x = np.moveaxis(x, -3, -4)  # (..., P, p, P, p, c)
    return x.reshape(*lead, P * p, P * p, c)


def sinusoidal_pe_2d(P: int, d: int) -> np.ndarray:
    """Fixed 2-D sin/cos table of shape (P*P, d), raster order.

    Channels ``[0, d/2)`` encode the row index and ``[d/2, d)`` the column,
    each as interleaved (sin, cos) pairs over frequencies 10000^(-2k/(d/2)).
    """
    if d % 4:
        raise ValueError(f"positional width must be divisible by 4, got {d}")
    half = d // 2
    omega = 1.0 / 10000.0 ** (np.arange(half // 2, dtype=np.float64) * 2.0 / half)

    def axis_table(pos):
        ang = pos[:, None] * omega[None, :]
        out = np.empty((pos.size, half))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    rows, cols = np.divmod(np.arange(P * P, dtype=np.float64), P)
    return np.concatenate([axis_table(rows), axis_table(cols)], axis=1)


def random_mask(n: int, ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Split ``range(n)`` into (visible, masked) index arrays, both sorted.

    Fisher-Yates shuffle of ``0..n-1`` driven by ``rng.integers``; the first
    ``ceil((1 - ratio) * n)`` shuffled indices are visible.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    keep = int(np.ceil(round((1.0 - ratio) * n, 9)))
    return np.sort(perm[:keep]).astype(np.intp), np.sort(perm[keep:]).astype(np.intp)


def normalize_patch(patch: np.ndarray, eps: float = NORM_EPS):
    """Per-patch standardization over the last axis.

    Returns ``(normalized, mean, std)`` with ``normalized = (x - mean) / (std + eps)``
    and ``std`` the population standard deviation.
    """
    x = np.asarray(patch)
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    return (x - mu) / (sd + eps), mu, sd


def surroundings(i: int, j: int, P: int) -> list[int]:
    """Raster indices of the (up to 8) grid neighbours of patch (i, j)."""
    out = []
    for k in (i - 1, i, i + 1):
        for l in (j - 1, j, j + 1):
            if (k, l) != (i, j) and 0 <= k < P and 0 <= l < P:
                out.append(k * P + l)
    return out


def complement(visible: np.ndarray, n: int) -> np.ndarray:
    """Row-wise sorted complement of ``visible`` (B, m) inside ``range(n)``."""
    visible = np.atleast_2d(visible)
    keep = np.ones((visible.shape[0], n), dtype=bool)
    np.put_along_axis(keep, visible, False, axis=1)
    return np.nonzero(keep)[1].reshape(visible.shape[0], n - visible.shape[1])


# -- the model -------------------------------------------------------------


class MAE:
    """Masked autoencoder with named, trainable :class:`Tensor` parameters."""

    def __init__(self, config: MAEConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        fs = config.frame
        de, dd = config.enc_dim, config.dec_dim

        def param(arr):
            return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

        self.patch_w = param(trunc_normal(rng, (fs.patch_dim, de), dtype=dtype))
        self.patch_b = param(np.zeros(de))
        self.cls_token = param(trunc_normal(rng, (de,), dtype=dtype))
        self.enc_blocks = [
            TransformerLayerParams.init(de, config.enc_heads, config.mlp_ratio, rng, dtype)
            for _ in range(config.enc_depth)
        ]
        self.enc_norm_g = param(np.ones(de))
        self.enc_norm_b = param(np.zeros(de))

        self.dec_embed_w = param(trunc_normal(rng, (de, dd), dtype=dtype))
        self.dec_embed_b = param(np.zeros(dd))
        self.mask_token = param(trunc_normal(rng, (dd,), dtype=dtype))
        self.dec_blocks = [
            TransformerLayerParams.init(dd, config.dec_heads, config.mlp_ratio, rng, dtype)
            for _ in range(config.dec_depth)
        ]
        self.dec_norm_g = param(np.ones(dd))
        self.dec_norm_b = param(np.zeros(dd))
        self.pred_w = param(trunc_normal(rng, (dd, fs.patch_dim), dtype=dtype))
        self.pred_b = param(np.zeros(fs.patch_dim))

        self.enc_pe = sinusoidal_pe_2d(fs.P, de).astype(dtype)
        self.dec_pe = sinusoidal_pe_2d(fs.P, dd).astype(dtype)

    # -- parameter bookkeeping ------------------------------------------
    def encoder_parameters(self) -> dict[str, Tensor]:
        out = {"encoder.patch_embed.weight": self.patch_w, "encoder.patch_embed.bias": self.patch_b}
        for i, blk in enumerate(self.enc_blocks):
            out.update(blk.named_parameters(f"encoder.blocks.{i}."))
        out["encoder.norm.weight"] = self.enc_norm_g
        out["encoder.norm.bias"] = self.enc_norm_b
        return out

    def decoder_parameters(self) -> dict[str, Tensor]:
        out = {"decoder.embed.weight": self.dec_embed_w, "decoder.embed.bias": self.dec_embed_b}
        for i, blk in enumerate(self.dec_blocks):
            out.update(blk.named_parameters(f"decoder.blocks.{i}."))
        out["decoder.norm.weight"] = self.dec_norm_g
        out["decoder.norm.bias"] = self.dec_norm_b
        out["decoder.pred.weight"] = self.pred_w
        out["decoder.pred.bias"] = self.pred_b
        return out

    def token_parameters(self) -> dict[str, Tensor]:
        return {"encoder.cls_token": self.cls_token, "decoder.mask_token": self.mask_token}

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.encoder_parameters()
        out.update(self.decoder_parameters())
        out.update(self.token_parameters())
        return out

    def parameter_counts(self) -> dict[str, int]:
        enc = sum(p.size for p in self.encoder_parameters().values())
        dec = sum(p.size for p in self.decoder_parameters().values())
        tok = sum(p.size for p in self.token_parameters().values())
        return {"encoder": enc, "decoder": dec, "tokens": tok, "total": enc + dec + tok}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state_arrays(self, arrays) -> None:
        for name, p in self.named_parameters().items():
            if name not in arrays:
                raise KeyError(f"snapshot lacks parameter {name!r}")
            arr = np.asarray(arrays[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: snapshot shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(self.dtype)

    # -- forward pieces -------------------------------------------------
    def _frames(self, frames) -> np.ndarray:
        frames = np.asarray(frames, dtype=self.dtype)
        return frames[None] if frames.ndim == 3 else frames

    def encode(self, patches: np.ndarray, visible: np.ndarray) -> Tensor:
        """Encoder over ``[cls] + visible`` patches; returns (B, 1 + m, d_enc) after the final LN."""
        patches = np.asarray(patches, dtype=self.dtype)
        visible = np.atleast_2d(np.asarray(visible, dtype=np.intp))
        B = patches.shape[0]
        rows = np.take_along_axis(patches, visible[..., None], axis=1)
        x = T.linear(Tensor(rows), self.patch_w, self.patch_b) + self.enc_pe[visible]
        cls = T.broadcast_to(self.cls_token.reshape(1, 1, -1), (B, 1, self.config.enc_dim))
        x = T.concat([cls, x], axis=1)
        for blk in self.enc_blocks:
            x = transformer_layer(x, blk)
        return T.layer_norm(x, self.enc_norm_g, self.enc_norm_b, LN_EPS)

    def decode(self, latent: Tensor, visible: np.ndarray, query_rows=None) -> Tensor:
        """Decoder over all ``P*P`` positions; returns normalized-patch predictions (B, N, p*p*c).

        With ``query_rows`` (B, q) only those positions are predicted, giving (B, q, p*p*c).
        """
        visible = np.atleast_2d(np.asarray(visible, dtype=np.intp))
        B, m = visible.shape
        n = self.config.frame.n_patches
        dd = self.config.dec_dim
        y = T.linear(latent[:, 1:, :], self.dec_embed_w, self.dec_embed_b)
        if m < n:
            masks = T.broadcast_to(self.mask_token.reshape(1, 1, dd), (B, n - m, dd))
            y = T.concat([y, masks], axis=1)
            order = np.concatenate([visible, complement(visible, n)], axis=1)
            y = T.gather_rows(y, np.argsort(order, axis=1, kind="stable"))
        return self._decoder_stack(y + self.dec_pe, query_rows)

    def _decoder_stack(self, y: Tensor, query_rows=None) -> Tensor:
        last = len(self.dec_blocks) - 1
        for k, blk in enumerate(self.dec_blocks):
            if k == last and query_rows is not None:
                # the final layer's outputs are row-local given its keys
                y = transformer_layer(T.gather_rows(y, query_rows), blk, context=y)
            else:
                y = transformer_layer(y, blk)
        y = T.layer_norm(y, self.dec_norm_g, self.dec_norm_b, LN_EPS)
        return T.linear(y, self.pred_w, self.pred_b)

    def forward(self, frames, visible) -> Tensor:
        """Predicted normalized patches (B, N, p*p*c) given per-frame visible indices (B, m)."""
        frames = self._frames(frames)
        visible = np.atleast_2d(np.asarray(visible, dtype=np.intp))
        if visible.shape[0] == 1 and frames.shape[0] > 1:
            visible = np.broadcast_to(visible, (frames.shape[0], visible.shape[1]))
        patches = patchify(frames, self.config.frame.p)
        return self.decode(self.encode(patches, visible), visible)

    __call__ = forward

    def loss(self, frames, predictions: Tensor, masked) -> Tensor:
        """Mean over masked patches of the per-patch MSE to the normalized target."""
        frames = self._frames(frames)
        masked = np.atleast_2d(np.asarray(masked, dtype=np.intp))
        if masked.shape[1] == 0:
            raise ValueError("loss needs at least one masked patch")
        target, _, _ = normalize_patch(patchify(frames, self.config.frame.p))
        B, n, pd = target.shape
        if masked.shape[0] == 1 and B > 1:
            masked = np.broadcast_to(masked, (B, masked.shape[1]))
        weights = np.zeros((B, n, 1), dtype=self.dtype)
        np.put_along_axis(weights[..., 0], masked, 1.0 / (B * masked.shape[1] * pd), axis=1)
        diff = predictions - target.astype(self.dtype)
        return T.sum(diff * diff * weights)

    # -- inference helpers ------------------------------------------------
    def embed(self, frames) -> np.ndarray:
        """Encoder outputs (B, N, d_enc) for every patch, all patches visible."""
        frames = self._frames(frames)
        n = self.config.frame.n_patches
        visible = np.broadcast_to(np.arange(n), (frames.shape[0], n))
        with no_grad():
            z = self.encode(patchify(frames, self.config.frame.p), visible)
        return z.data[:, 1:, :]

    def reconstruct_from_surroundings(self, frame, position: tuple[int, int]) -> np.ndarray:
        """Prediction for patch ``(i, j)`` when only its grid neighbours are visible."""
        i, j = position
        P = self.config.frame.P
        if not (0 <= i < P and 0 <= j < P):
            raise ValueError(f"patch position {(i, j)} outside the {P}x{P} grid")
        visible = np.array([surroundings(i, j, P)])
        with no_grad():
            pred = self.forward(frame, visible)
        return pred.data[0, i * P + j]

    def reconstruct_all_from_surroundings(self, frames) -> np.ndarray:
        """For every patch, its prediction from its neighbours: (B, N, p*p*c).

        Positions with the same neighbour count are evaluated together.
        """
        frames = self._frames(frames)
        fs = self.config.frame
        P, n = fs.P, fs.n_patches
        patches = patchify(frames, fs.p)
        B = frames.shape[0]
        out = np.empty((B, n, fs.patch_dim), dtype=self.dtype)
        groups: dict[int, list[int]] = {}
        for idx in range(n):
            groups.setdefault(len(surroundings(*divmod(idx, P), P)), []).append(idx)
        with no_grad():
            for targets in groups.values():
                vis = np.array([surroundings(*divmod(t, P), P) for t in targets])
                g = len(targets)
                vis_b = np.tile(vis, (B, 1))
                pat_b = np.repeat(patches, g, axis=0)
                tgt = np.tile(np.asarray(targets), B)
                pred = self.decode(self.encode(pat_b, vis_b), vis_b, query_rows=tgt[:, None]).data
                out[np.repeat(np.arange(B), g), tgt] = pred[:, 0]
        return out

    def decoder_probe(self, mode: str) -> np.ndarray:
        """Decoder output (N, p*p*c) from tokens built without any encoder input."""
        n, dd = self.config.frame.n_patches, self.config.dec_dim
        if mode == "pe_plus_mask":
            tokens = T.broadcast_to(self.mask_token.reshape(1, 1, dd), (1, n, dd)) + self.dec_pe
        elif mode == "pe_only":
            tokens = Tensor(self.dec_pe[None].copy())
        elif mode == "mask_only":
            tokens = T.broadcast_to(self.mask_token.reshape(1, 1, dd), (1, n, dd))
        else:
            raise ValueError(f"unknown probe mode {mode!r}; expected one of {PROBE_MODES}")
        with no_grad():
            return self._decoder_stack(tokens).data[0]


def denormalize(patches: np.ndarray, channel_mean: np.ndarray, channel_std: np.ndarray, c: int = 3) -> np.ndarray:
    """Map normalized patches to pixel space with per-channel dataset statistics."""
    x = np.asarray(patches, dtype=np.float64).reshape(*np.shape(patches)[:-1], -1, c)
    x = x * np.asarray(channel_std) + np.asarray(channel_mean)
    return np.clip(x, 0.0, 1.0).reshape(np.shape(patches))
