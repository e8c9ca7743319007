"""AdamW, gradient clipping and the warmup-cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor

__all__ = ["OptimizerState", "adamw_step", "AdamW", "clip_grad_norm", "warmup_cosine_lr"]


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.95),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One decoupled-weight-decay Adam update; ``t`` is the 1-based step index.

    Returns new ``(param, m, v)`` arrays; inputs are not modified.
    """
    b1, b2 = betas
    dtype = param.dtype
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    p = param * (1.0 - lr * weight_decay) if weight_decay else param
    p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p.astype(dtype, copy=False), m.astype(dtype, copy=False), v.astype(dtype, copy=False)


def _default_decay(name: str, p: Tensor) -> bool:
    # matrices decay; biases, norms and tokens do not
    return p.ndim >= 2


class AdamW:
    """AdamW over a named parameter dict.

    ``decay_filter(name, tensor)`` decides which parameters receive weight decay.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        decay_filter: Callable[[str, Tensor], bool] = _default_decay,
    ):
        self.params = dict(params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, betas=betas, eps=eps)
        self.decay = {n: decay_filter(n, p) for n, p in self.params.items()}
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        st = self.state
        if lr is not None:
            st.lr = lr
        st.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            wd = st.weight_decay if self.decay[name] else 0.0
            p.data, st.m[name], st.v[name] = adamw_step(
                p.data, p.grad, st.m[name], st.v[name], st.t, st.lr, st.betas, st.eps, wd
            )

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"optim.m.{name}"] = self.state.m[name]
            out[f"optim.v.{name}"] = self.state.v[name]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        for name, p in self.params.items():
            self.state.m[name] = np.asarray(arrays[f"optim.m.{name}"], dtype=p.dtype).reshape(p.shape)
            self.state.v[name] = np.asarray(arrays[f"optim.v.{name}"], dtype=p.dtype).reshape(p.shape)
        self.state.t = t


def clip_grad_norm(params: Mapping[str, Tensor] | list[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.  Summation order follows parameter order.
    """
    tensors = list(params.values()) if isinstance(params, Mapping) else list(params)
    total = 0.0
    for p in tensors:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in tensors:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype, copy=False)
    return norm


def warmup_cosine_lr(step: int, total_steps: int, warmup_steps: int, peak_lr: float, min_lr: float = 0.0) -> float:
    """Linear warmup from 0 to ``peak_lr`` then half-cosine decay to ``min_lr``."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return min_lr + (peak_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))
