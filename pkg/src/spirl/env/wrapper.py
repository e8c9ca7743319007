from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

from .base import Env, EnvError, StepResult

NOOP_ACTION = 0
# mixed into the reset seed so the no-op draw is independent of the game's own rng
_NOOP_STREAM = 0x5E1EC7


@dataclass(frozen=True)
class WrapperConfig:
    frame_skip: int = 4
    frame_stack: int = 4
    action_repeat: int = 4
    max_noops: int = 30
    reward_clip: float = 1.0
    max_frames: int = 108_000
    terminal_on_life_loss: bool = False

    def __post_init__(self):
        if self.frame_skip != self.action_repeat:
            raise ValueError("frame_skip and action_repeat are one mechanism and must be equal")
        if self.frame_skip < 1 or self.frame_stack < 1 or self.max_noops < 0:
            raise ValueError("frame_skip and frame_stack must be >= 1, max_noops >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


class AtariStyleWrapper(Env):
    """Repeat each action ``frame_skip`` times, sum and clip the reward, return the last frame.

    ``reset`` applies a seed-reproducible number of no-ops in ``[0, max_noops]``
    and the episode is cut once ``max_frames`` raw frames have been consumed.
    """

    def __init__(self, env: Env, config: WrapperConfig | None = None):
        self.env = env
        self.config = config or WrapperConfig()
        self.action_count = env.action_count
        self.frame_shape = env.frame_shape
        self.raw_frames = 0
        self.noops = 0
        self.done = True

    def reset(self, seed: int) -> np.ndarray:
        cfg = self.config
        frame = self.env.reset(seed)
        self.raw_frames = 0
        self.done = False
        rng = np.random.default_rng([int(seed), _NOOP_STREAM])
        self.noops = int(rng.integers(0, cfg.max_noops + 1))
        for _ in range(self.noops):
            frame, _, done, _ = self.env.step(NOOP_ACTION)
            self.raw_frames += 1
            if done:
                # the game ended during the no-op prefix; start over without no-ops
                frame = self.env.reset(seed)
                self.raw_frames = 0
                break
        return frame

    def step(self, action: int) -> StepResult:
        if self.done:
            raise EnvError("step() called on a finished episode; call reset()")
        a = self._check_action(action)
        cfg = self.config
        total = 0.0
        done = False
        info: dict = {}
        life_lost = False
        frame = None
        for _ in range(cfg.frame_skip):
            frame, r, done, info = self.env.step(a)
            total += float(r)
            self.raw_frames += 1
            life_lost = life_lost or bool(info.get("life_lost", False))
            if done or self.raw_frames >= cfg.max_frames:
                break
        truncated = not done and self.raw_frames >= cfg.max_frames
        done = done or truncated or (cfg.terminal_on_life_loss and life_lost)
        self.done = done
        info = dict(info, raw_reward=total, raw_frames=self.raw_frames, truncated=truncated)
        reward = float(np.clip(total, -cfg.reward_clip, cfg.reward_clip))
        return frame, reward, done, info

    def close(self) -> None:
        self.env.close()


class FrameStack:
    """Sliding window of the last ``k`` items; the first item of an episode fills every slot."""

    def __init__(self, k: int = 4):
        self.k = k
        self._items: deque = deque(maxlen=k)

    def reset(self, item) -> list:
        self._items.clear()
        self._items.extend([item] * self.k)
        return list(self._items)

    def push(self, item) -> list:
        if not self._items:
            return self.reset(item)
        self._items.append(item)
        return list(self._items)

    def state(self) -> list:
        return list(self._items)
