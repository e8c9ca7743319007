from __future__ import annotations

import abc
from typing import Any

import numpy as np

StepResult = tuple[np.ndarray, float, bool, dict[str, Any]]


class EnvError(RuntimeError):
    """Misuse of an environment, e.g. stepping after the episode ended."""


class Env(abc.ABC):
    """Minimal episodic environment over RGB uint8 frames of shape (h, w, c)."""

    action_count: int
    frame_shape: tuple[int, int, int]

    @abc.abstractmethod
    def reset(self, seed: int) -> np.ndarray:
        ...

    @abc.abstractmethod
    def step(self, action: int) -> StepResult:
        ...

    def close(self) -> None:
        pass

    def _check_action(self, action: int) -> int:
        a = int(action)
        if not 0 <= a < self.action_count:
            raise EnvError(f"action {action} outside [0, {self.action_count})")
        return a
