"""Pre-LN transformer layers built on :mod:`spirl.tensor`.

Each head ``l`` owns query/key/value projections of shape ``d x d_head`` with
``d_head = d / k``; the ``k`` heads are stored fused as one ``d x 3d`` matrix
(columns ``[Q_0..Q_{k-1} | K_0..K_{k-1} | V_0..V_{k-1}]``) plus a bias.  Scores
are scaled by ``sqrt(d_head)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

LN_EPS = 1e-6
INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def _param(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class AttentionWeights:
    qkv_w: Tensor
    qkv_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    heads: int

    def __post_init__(self):
        d = self.proj_w.shape[0]
        if d % self.heads:
            raise ValueError(f"model width {d} is not divisible by {self.heads} heads")
        if self.qkv_w.shape != (d, 3 * d):
            raise ValueError(f"qkv weight must be ({d}, {3 * d}), got {self.qkv_w.shape}")

    @property
    def d(self) -> int:
        return self.proj_w.shape[0]

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    def head_projections(self, head: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """The (W^Q, W^K, W^V) matrices of one head, each ``d x d_head``."""
        d, dh = self.d, self.d_head
        cols = slice(head * dh, (head + 1) * dh)
        w = self.qkv_w.data
        return w[:, cols], w[:, d:][:, cols], w[:, 2 * d:][:, cols]

    @classmethod
    def init(cls, d: int, heads: int, rng: np.random.Generator, dtype=np.float32) -> "AttentionWeights":
        return cls(
            qkv_w=_param(trunc_normal(rng, (d, 3 * d), dtype=dtype)),
            qkv_b=_param(np.zeros(3 * d, dtype=dtype)),
            proj_w=_param(trunc_normal(rng, (d, d), dtype=dtype)),
            proj_b=_param(np.zeros(d, dtype=dtype)),
            heads=heads,
        )

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            f"{prefix}qkv.weight": self.qkv_w,
            f"{prefix}qkv.bias": self.qkv_b,
            f"{prefix}proj.weight": self.proj_w,
            f"{prefix}proj.bias": self.proj_b,
        }


@dataclass
class TransformerLayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionWeights
    ln2_g: Tensor
    ln2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    @classmethod
    def init(cls, d: int, heads: int, mlp_ratio: int, rng: np.random.Generator, dtype=np.float32):
        hidden = d * mlp_ratio
        return cls(
            ln1_g=_param(np.ones(d, dtype=dtype)),
            ln1_b=_param(np.zeros(d, dtype=dtype)),
            attn=AttentionWeights.init(d, heads, rng, dtype),
            ln2_g=_param(np.ones(d, dtype=dtype)),
            ln2_b=_param(np.zeros(d, dtype=dtype)),
            fc1_w=_param(trunc_normal(rng, (d, hidden), dtype=dtype)),
            fc1_b=_param(np.zeros(hidden, dtype=dtype)),
            fc2_w=_param(trunc_normal(rng, (hidden, d), dtype=dtype)),
            fc2_b=_param(np.zeros(d, dtype=dtype)),
        )

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}norm1.weight": self.ln1_g, f"{prefix}norm1.bias": self.ln1_b}
        out.update(self.attn.named_parameters(f"{prefix}attn."))
        out.update(
            {
                f"{prefix}norm2.weight": self.ln2_g,
                f"{prefix}norm2.bias": self.ln2_b,
                f"{prefix}mlp.fc1.weight": self.fc1_w,
                f"{prefix}mlp.fc1.bias": self.fc1_b,
                f"{prefix}mlp.fc2.weight": self.fc2_w,
                f"{prefix}mlp.fc2.bias": self.fc2_b,
            }
        )
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())


# -- attention ----------------------------------------------------------


def _key_bias(key_mask, dtype) -> np.ndarray | None:
    """Additive score bias: 0 for usable keys, -inf for masked ones."""
    if key_mask is None:
        return None
    keep = np.asarray(key_mask, dtype=bool)
    return np.where(keep, 0.0, -np.inf).astype(dtype)


def attention(q, K, V, key_mask=None, return_weights: bool = False):
    """softmax(q K^T / sqrt(d_head)) V.

    ``q`` is (..., nq, d_head) or a single (d_head,) vector; ``K``/``V`` are
    (..., n, d_head).  ``key_mask`` (..., n) marks usable keys; masked keys get
    exactly zero weight.
    """
    q, K, V = T._lift(q), T._lift(K), T._lift(V)
    if K.shape[-2] == 0:
        raise ValueError("attention over an empty key set")
    vector = q.ndim == 1
    if vector:
        q = q.reshape(1, q.shape[0])
    scores = T.matmul(q, K.transpose(_swap_last(K.ndim))) * (1.0 / math.sqrt(K.shape[-1]))
    bias = _key_bias(key_mask, scores.dtype)
    if bias is not None:
        scores = scores + np.expand_dims(bias, -2)
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, V)
    if vector:
        out = out.reshape(out.shape[-1])
    return (out, weights) if return_weights else out


def _swap_last(ndim: int) -> tuple[int, ...]:
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)


def sdpa(x_i, X, weights: AttentionWeights, head: int = 0):
    """One head: Attention(x_i W^Q, X W^K, X W^V) with that head's projections and biases."""
    x_i, X = T._lift(x_i), T._lift(X)
    d, dh = weights.d, weights.d_head
    lo = head * dh
    wq = weights.qkv_w[:, lo:lo + dh]
    wk = weights.qkv_w[:, d + lo:d + lo + dh]
    wv = weights.qkv_w[:, 2 * d + lo:2 * d + lo + dh]
    bq = weights.qkv_b[lo:lo + dh]
    bk = weights.qkv_b[d + lo:d + lo + dh]
    bv = weights.qkv_b[2 * d + lo:2 * d + lo + dh]
    return attention(T.linear(x_i, wq, bq), T.linear(X, wk, bk), T.linear(X, wv, bv))


def mhsa(x, X, weights: AttentionWeights, key_mask=None, return_weights: bool = False):
    """Multi-head attention of queries ``x`` over the rows of ``X``.

    ``x`` is (..., nq, d) or a single (d,) vector, ``X`` is (..., n, d).  The
    head outputs are concatenated and projected by W^O.  With
    ``return_weights`` the per-head attention (..., k, nq, n) is returned too.
    """
    x, X = T._lift(x), T._lift(X)
    vector = x.ndim == 1
    if vector:
        x = x.reshape(1, x.shape[0])
    d, k, dh = weights.d, weights.heads, weights.d_head
    lead = X.shape[:-2]
    nq, n = x.shape[-2], X.shape[-2]
    if n == 0:
        raise ValueError("attention over an empty key set")
    if x is X:
        qkv = T.linear(x, weights.qkv_w, weights.qkv_b)
        qkv = qkv.reshape(lead + (n, 3, k, dh))
        perm = tuple(range(len(lead))) + tuple(len(lead) + a for a in (1, 2, 0, 3))
        qkv = qkv.transpose(perm)  # (..., 3, k, n, dh)
        q = qkv[(Ellipsis, 0, slice(None), slice(None), slice(None))]
        kk = qkv[(Ellipsis, 1, slice(None), slice(None), slice(None))]
        v = qkv[(Ellipsis, 2, slice(None), slice(None), slice(None))]
    else:
        q = T.linear(x, weights.qkv_w[:, :d], weights.qkv_b[:d])
        kv = T.linear(X, weights.qkv_w[:, d:], weights.qkv_b[d:])
        qlead = x.shape[:-2]
        q = q.reshape(qlead + (nq, k, dh)).transpose(_heads_first(len(qlead)))
        kv = kv.reshape(lead + (n, 2, k, dh))
        perm = tuple(range(len(lead))) + tuple(len(lead) + a for a in (1, 2, 0, 3))
        kv = kv.transpose(perm)  # (..., 2, k, n, dh)
        kk = kv[(Ellipsis, 0, slice(None), slice(None), slice(None))]
        v = kv[(Ellipsis, 1, slice(None), slice(None), slice(None))]
    mask = None if key_mask is None else np.expand_dims(np.asarray(key_mask, dtype=bool), -2)
    heads, attn = attention(q, kk, v, key_mask=mask, return_weights=True)  # (..., k, nq, dh)
    qlead = heads.shape[:-3]
    merged = heads.transpose(_heads_first(len(qlead))).reshape(qlead + (nq, d))
    out = T.linear(merged, weights.proj_w, weights.proj_b)
    if vector:
        out = out.reshape(d)
    return (out, attn) if return_weights else out


def _heads_first(nlead: int) -> tuple[int, ...]:
    # (..., a, b, c) <-> (..., b, a, c); an involution
    return tuple(range(nlead)) + (nlead + 1, nlead, nlead + 2)


def mlp(x: Tensor, p: TransformerLayerParams) -> Tensor:
    return T.linear(T.gelu(T.linear(x, p.fc1_w, p.fc1_b)), p.fc2_w, p.fc2_b)


def transformer_layer(
    X,
    params: TransformerLayerParams,
    internal_residual: bool = True,
    context=None,
    key_mask=None,
    return_weights: bool = False,
):
    """Pre-LN transformer layer over the rows of ``X`` (..., n, d).

    With ``internal_residual``::

        x'_i = x_i + MHSA(LN(x_i), LN(X));   z_i = x'_i + MLP(LN(x'_i))

    and without it the two skip terms are dropped.  When ``context`` is given
    the keys/values come from ``LN(context)`` instead of ``LN(X)``.
    """
    X = T._lift(X)
    ln_x = T.layer_norm(X, params.ln1_g, params.ln1_b, LN_EPS)
    if context is None:
        keys = ln_x
    else:
        keys = T.layer_norm(T._lift(context), params.ln1_g, params.ln1_b, LN_EPS)
    att, weights = mhsa(ln_x, keys, params.attn, key_mask=key_mask, return_weights=True)
    x1 = X + att if internal_residual else att
    m = mlp(T.layer_norm(x1, params.ln2_g, params.ln2_b, LN_EPS), params)
    z = x1 + m if internal_residual else m
    return (z, weights) if return_weights else z

