"""Attention pooling of a variable set of salient-patch embeddings into one vector.

A salient set holds ``B`` slots.  Real slots carry an encoder embedding and a
raster position; pad slots are filled according to the pad mode.  Real slots
are projected to the aggregator width and get the 2-D sinusoidal code of
their position.  One transformer layer without internal residuals follows:
with ``cls`` pooling a learned query token attends over the slots, with
``average`` pooling the slots attend over each other and the non-pad
outputs are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..mae import sinusoidal_pe_2d
from ..saliency import PAD_MODES
from ..tensor import Tensor
from ..transformer import TransformerLayerParams, transformer_layer, trunc_normal

POOLING_MODES: tuple[str, ...] = ("cls", "average")


@dataclass
class SalientSet:
    """``B`` slots of (position, embedding); ``positions[s] == -1`` marks a pad slot."""

    embeddings: np.ndarray  # (B, d_in) float32
    positions: np.ndarray  # (B,) raster index or -1

    @property
    def is_pad(self) -> np.ndarray:
        return self.positions < 0

    @property
    def n_real(self) -> int:
        return int((self.positions >= 0).sum())

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class AggregatorConfig:
    grid: int = 12
    in_dim: int = 64
    dim: int = 32
    heads: int = 8
    mlp_ratio: int = 4
    pooling: str = "cls"
    pad_mode: str = "zero_pad"

    def __post_init__(self):
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"unknown pooling {self.pooling!r}; expected one of {POOLING_MODES}")
        if self.pad_mode not in PAD_MODES:
            raise ValueError(f"unknown pad mode {self.pad_mode!r}; expected one of {PAD_MODES}")


class Aggregator:
    def __init__(self, config: AggregatorConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        d = config.dim
        self.proj_w = Tensor(trunc_normal(rng, (config.in_dim, d), dtype=dtype), requires_grad=True)
        self.proj_b = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.cls_token = Tensor(trunc_normal(rng, (d,), dtype=dtype), requires_grad=True)
        self.pad_token = Tensor(trunc_normal(rng, (d,), dtype=dtype), requires_grad=True)
        self.layer = TransformerLayerParams.init(d, config.heads, config.mlp_ratio, rng, dtype)
        self.pe = sinusoidal_pe_2d(config.grid, d).astype(dtype)

    def named_parameters(self, prefix: str = "aggregator.") -> dict[str, Tensor]:
        out = {
            f"{prefix}proj.weight": self.proj_w,
            f"{prefix}proj.bias": self.proj_b,
            f"{prefix}cls_token": self.cls_token,
        }
        if self.config.pad_mode == "trainable_pad":
            out[f"{prefix}pad_token"] = self.pad_token
        out.update(self.layer.named_parameters(f"{prefix}layer."))
        return out

    def _tokens(self, embeddings: np.ndarray, positions: np.ndarray) -> Tensor:
        """Slot tokens (..., B, dim): projection plus position code, pads per pad mode."""
        pad = positions < 0
        real = (~pad)[..., None].astype(self.pe.dtype)
        x = T.linear(Tensor(np.asarray(embeddings, dtype=self.pe.dtype)), self.proj_w, self.proj_b)
        pe = self.pe[np.where(pad, 0, positions)] * real
        x = (x + pe) * real
        if self.config.pad_mode == "trainable_pad" and pad.any():
            x = x + T.broadcast_to(self.pad_token, x.shape) * (1.0 - real)
        return x

    def __call__(self, embeddings, positions, return_weights: bool = False):
        """Aggregate slots (..., B, d_in) with positions (..., B) into (..., dim).

        With ``return_weights`` the head-averaged attention of the pooling
        query over the slots (..., B) is returned as well (``cls`` pooling only).
        """
        positions = np.asarray(positions)
        pad = positions < 0
        x = self._tokens(embeddings, positions)
        key_mask = None
        if self.config.pad_mode == "masked_attention":
            key_mask = ~pad
            empty = ~key_mask.any(axis=-1)
            if empty.any():
                # nothing to attend to; let the first pad slot stand in
                key_mask = key_mask.copy()
                key_mask[empty, 0] = True
        if self.config.pooling == "cls":
            lead = x.shape[:-2]
            q = T.broadcast_to(self.cls_token.reshape(*(1,) * len(lead), 1, self.config.dim), lead + (1, self.config.dim))
            z, w = transformer_layer(q, self.layer, internal_residual=False, context=x, key_mask=key_mask, return_weights=True)
            out = z.reshape(lead + (self.config.dim,))
            if return_weights:
                # (..., heads, 1, B) -> (..., B)
                return out, w.data.mean(axis=-3)[..., 0, :]
            return out
        if return_weights:
            raise ValueError("attention weights are defined for cls pooling only")
        z = transformer_layer(x, self.layer, internal_residual=False, key_mask=key_mask)
        keep = (~pad).astype(self.pe.dtype)
        counts = keep.sum(axis=-1, keepdims=True)
        # all-pad sets average to the zero vector
        scale = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
        return T.sum(z * (keep * scale)[..., None], axis=-2)

    def aggregate_set(self, s: SalientSet) -> np.ndarray:
        with T.no_grad():
            return self(s.embeddings, s.positions).data


def all_pad(positions) -> np.ndarray:
    """True where a set has no real slot (average pooling then yields the zero vector)."""
    return ~(np.asarray(positions) >= 0).any(axis=-1)


def policy_attention(weights, mass: float = 0.6, tol: float = 1e-12) -> np.ndarray:
    """Smallest set of slots (by descending weight, index tie-break) holding ``mass`` of the total.

    Returns slot indices in the order they were added.
    """
    w = np.asarray(weights, dtype=np.float64).ravel()
    total = w.sum()
    if total <= 0:
        raise ValueError("attention weights sum to zero")
    order = np.argsort(-w, kind="stable")
    csum = np.cumsum(w[order])
    k = int(np.searchsorted(csum, mass * total - tol * total, side="left")) + 1
    return order[:min(k, w.size)]
