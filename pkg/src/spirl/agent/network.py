from __future__ import annotations

import hashlib

import numpy as np

from .. import tensor as T
from ..tensor import Tensor
from ..transformer import trunc_normal
from .aggregator import Aggregator, AggregatorConfig


class QHead:
    """MLP from concatenated frame aggregates to one value per action."""

    def __init__(self, in_dim: int, hidden: int, n_actions: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1_w = Tensor(trunc_normal(rng, (in_dim, hidden), dtype=dtype), requires_grad=True)
        self.fc1_b = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.fc2_w = Tensor(trunc_normal(rng, (hidden, n_actions), dtype=dtype), requires_grad=True)
        self.fc2_b = Tensor(np.zeros(n_actions, dtype=dtype), requires_grad=True)

    def named_parameters(self, prefix: str = "q.") -> dict[str, Tensor]:
        return {
            f"{prefix}fc1.weight": self.fc1_w,
            f"{prefix}fc1.bias": self.fc1_b,
            f"{prefix}fc2.weight": self.fc2_w,
            f"{prefix}fc2.bias": self.fc2_b,
        }

    def __call__(self, x) -> Tensor:
        return T.linear(T.gelu(T.linear(x, self.fc1_w, self.fc1_b)), self.fc2_w, self.fc2_b)


class PolicyNetwork:
    """Aggregator shared across the stacked frames, followed by the Q head."""

    def __init__(self, agg_config: AggregatorConfig, n_actions: int, stack: int = 4, hidden: int = 256, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.stack = stack
        self.n_actions = n_actions
        self.aggregator = Aggregator(agg_config, rng)
        self.head = QHead(stack * agg_config.dim, hidden, n_actions, rng)

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.aggregator.named_parameters()
        out.update(self.head.named_parameters())
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_arrays(self, arrays) -> None:
        for name, p in self.named_parameters().items():
            arr = np.asarray(arrays[name], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def aggregates(self, embeddings, positions) -> Tensor:
        """(..., stack, B, d_in) slots -> (..., stack * dim) concatenated aggregates."""
        a = self.aggregator(embeddings, positions)
        return a.reshape(a.shape[:-2] + (a.shape[-2] * a.shape[-1],))

    def q_values(self, embeddings, positions) -> Tensor:
        return self.head(self.aggregates(embeddings, positions))

    def q_numpy(self, embeddings, positions) -> np.ndarray:
        with T.no_grad():
            return self.q_values(embeddings, positions).data


def act(q_values, epsilon: float, rng: np.random.Generator, n_actions: int | None = None) -> int:
    """Epsilon-greedy with lowest-index tie-break.

    ``q_values`` may be a callable; it is only evaluated on the greedy branch.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    if rng.random() < epsilon:
        if n_actions is None:
            n_actions = len(q_values)
        return int(rng.integers(0, n_actions))
    q = q_values() if callable(q_values) else q_values
    return int(np.argmax(np.asarray(q).ravel()))
