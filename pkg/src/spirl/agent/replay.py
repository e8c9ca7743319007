"""Prioritized replay over salient-set frames, plus n-step return helpers."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


class SumTree:
    """Binary tree of priority sums in heap layout; leaf ``i`` lives at node ``capacity + i``."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.nodes = np.zeros(2 * capacity, dtype=np.float64)

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    def __getitem__(self, leaf) -> np.ndarray:
        return self.nodes[self.capacity + np.asarray(leaf)]

    def update(self, leaves, values) -> None:
        leaves = np.atleast_1d(np.asarray(leaves, dtype=np.int64))
        values = np.broadcast_to(np.asarray(values, dtype=np.float64), leaves.shape)
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("priorities must be finite and non-negative")
        # later duplicates win, as with sequential assignment
        self.nodes[self.capacity + leaves] = values
        idx = np.unique((self.capacity + leaves) // 2)
        while idx.size and idx[0] >= 1:
            # recompute parents from their children so sums never drift
            self.nodes[idx] = self.nodes[2 * idx] + self.nodes[2 * idx + 1]
            if idx[0] == 1:
                break
            idx = np.unique(idx // 2)

    def find(self, values) -> np.ndarray:
        """Leaf whose cumulative-sum interval contains each value in [0, total)."""
        values = np.array(values, dtype=np.float64, ndmin=1)
        node = np.ones(values.shape, dtype=np.int64)
        active = node < self.capacity
        while active.any():
            n = node[active]
            v = values[active]
            left = self.nodes[2 * n]
            go_left = v < left
            node[active] = np.where(go_left, 2 * n, 2 * n + 1)
            values[active] = np.where(go_left, v, v - left)
            active = node < self.capacity
        return node - self.capacity


def n_step_target(rewards, gamma: float, bootstrap: float = 0.0, terminal: bool = False) -> float:
    """sum_m gamma^m r_m over the window, plus gamma^len * bootstrap unless the window hit a terminal."""
    rewards = list(rewards)
    if not rewards:
        raise ValueError("empty reward window")
    acc = 0.0
    for r in reversed(rewards):
        acc = float(r) + gamma * acc
    if not terminal:
        acc += gamma ** len(rewards) * float(bootstrap)
    return acc


def double_q_bootstrap(q_online_next: np.ndarray, q_target_next: np.ndarray) -> np.ndarray:
    """Target-network value of the online network's greedy action (lowest index on ties)."""
    a = np.argmax(q_online_next, axis=-1)
    return np.take_along_axis(q_target_next, a[..., None], axis=-1)[..., 0]


@dataclass
class Transition:
    state: np.ndarray  # frame ids (stack,)
    action: int
    rewards: np.ndarray  # (n,), zero beyond ``length``
    length: int
    terminal: bool
    next_state: np.ndarray  # frame ids (stack,)


class NStepBuffer:
    """Turns a stream of (state, action, reward) steps into n-step transitions."""

    def __init__(self, n: int):
        self.n = n
        self._window: deque = deque()

    def push(self, state, action, reward, next_state, done: bool) -> list[Transition]:
        self._window.append((np.asarray(state), int(action), float(reward)))
        out = []
        if len(self._window) == self.n and not done:
            out.append(self._emit(next_state, terminal=False))
            self._window.popleft()
        if done:
            while self._window:
                out.append(self._emit(next_state, terminal=True))
                self._window.popleft()
        return out

    def _emit(self, next_state, terminal: bool) -> Transition:
        rewards = np.zeros(self.n, dtype=np.float64)
        for m, (_, _, r) in enumerate(self._window):
            rewards[m] = r
        state, action, _ = self._window[0]
        return Transition(state, action, rewards, len(self._window), terminal, np.asarray(next_state))

    def clear(self) -> None:
        self._window.clear()


class PrioritizedReplay:
    """Fixed-capacity transition ring with a frame ring holding the salient sets.

    Frames are stored once and referenced by id.  A frame id ``f`` sits at slot
    ``f % frame_capacity``; the frame ring is sized so that every frame a live
    transition points at is still present: between a transition's oldest
    frame and now there are at most ``capacity + n`` env steps, each adding
    one frame plus at most one reset frame.
    """

    def __init__(
        self,
        capacity: int,
        slots: int,
        emb_dim: int,
        n: int,
        stack: int = 4,
        alpha: float = 0.5,
        eps: float = 1e-6,
    ):
        self.capacity = capacity
        self.alpha = alpha
        self.eps = eps
        self.n = n
        self.stack = stack
        self.tree = SumTree(capacity)
        self.max_priority = 1.0
        self.size = 0
        self._write = 0
        self.frame_capacity = 2 * (capacity + n) + 2 * stack
        self.frame_emb = np.zeros((self.frame_capacity, slots, emb_dim), dtype=np.float32)
        self.frame_pos = np.full((self.frame_capacity, slots), -1, dtype=np.int32)
        self._next_frame = 0
        self.states = np.zeros((capacity, stack), dtype=np.int64)
        self.next_states = np.zeros((capacity, stack), dtype=np.int64)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros((capacity, n), dtype=np.float64)
        self.lengths = np.zeros(capacity, dtype=np.int64)
        self.terminals = np.zeros(capacity, dtype=bool)

    def __len__(self) -> int:
        return self.size

    def add_frame(self, embeddings: np.ndarray, positions: np.ndarray) -> int:
        fid = self._next_frame
        slot = fid % self.frame_capacity
        self.frame_emb[slot] = embeddings
        self.frame_pos[slot] = positions
        self._next_frame += 1
        return fid

    def frames(self, ids) -> tuple[np.ndarray, np.ndarray]:
        slot = np.asarray(ids) % self.frame_capacity
        return self.frame_emb[slot], self.frame_pos[slot]

    def push(self, t: Transition) -> int:
        i = self._write
        self.states[i] = t.state
        self.next_states[i] = t.next_state
        self.actions[i] = t.action
        self.rewards[i] = t.rewards
        self.lengths[i] = t.length
        self.terminals[i] = t.terminal
        self.tree.update(i, self.max_priority**self.alpha)
        self._write = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return i

    def sample(self, batch: int, beta: float, rng: np.random.Generator):
        """Indices drawn with probability proportional to priority^alpha, plus normalized IS weights."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        total = self.tree.total
        u = rng.random(batch) * total
        idx = self.tree.find(u)
        # rounding at the very top of the range can land on an empty leaf
        empty = self.tree[idx] <= 0
        if empty.any():
            idx[empty] = (self._write - 1) % self.capacity
        probs = self.tree[idx] / total
        w = (self.size * probs) ** (-beta)
        return idx, (w / w.max()).astype(np.float64)

    def update_priorities(self, idx, td_errors) -> None:
        pr = np.abs(np.asarray(td_errors, dtype=np.float64)) + self.eps
        self.max_priority = max(self.max_priority, float(pr.max()))
        self.tree.update(idx, pr**self.alpha)
