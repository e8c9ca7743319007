"""A small deterministic sprite game used as a stand-in for Atari at desk scale.

The player (8x8) walks over a static procedurally textured background,
picking up collectibles (+1, they respawn elsewhere) and avoiding hazards
(-1, the episode ends).  Collectibles and hazards bounce back and forth on
fixed horizontal or vertical paths.  Everything is integer arithmetic driven
by seeded numpy generators, so a (seed, action sequence) pair always yields
the same frames.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .base import Env, EnvError, StepResult

NOOP, UP, DOWN, LEFT, RIGHT = range(5)
ACTION_NAMES = ("noop", "up", "down", "left", "right")
_MOVES = {NOOP: (0, 0), UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0)}

SPRITE = 8
LATTICE = 4

PALETTE = np.array([[34, 52, 104], [92, 138, 96]], dtype=np.uint8)
PLAYER_COLOR = (236, 236, 236)
PLAYER_CORE = (30, 30, 30)
COLLECTIBLE_COLOR = (250, 212, 36)
HAZARD_COLOR = (224, 36, 52)


def _mask(rows: list[str]) -> np.ndarray:
    return np.array([[ch == "#" for ch in r] for r in rows], dtype=bool)


PLAYER_MASK = _mask(["########"] * 8)
PLAYER_CORE_MASK = _mask(["........", "........", "..####..", "..####..", "..####..", "..####..", "........", "........"])
COLLECTIBLE_MASK = _mask(["...##...", "..####..", ".######.", "########", "########", ".######.", "..####..", "...##..."])
HAZARD_MASK = _mask(["##....##", "###..###", ".######.", "..####..", "..####..", ".######.", "###..###", "##....##"])


@dataclass(frozen=True)
class SpritesConfig:
    size: int = 96
    background_seed: int = 0
    n_collectibles: int = 2
    n_hazards: int = 2
    player_speed: int = 4
    collectible_speed: int = 1
    hazard_speed: int = 2
    step_cap: int = 1000

    def __post_init__(self):
        if self.size % 8 or self.size < 2 * SPRITE:
            raise ValueError(f"frame size must be a multiple of 8 and at least 16, got {self.size}")

    @classmethod
    def toy(cls, **kw) -> "SpritesConfig":
        base = dict(size=48, n_collectibles=1, n_hazards=1)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def render_background(size: int, seed: int) -> np.ndarray:
    """Static two-colour texture: each 8x8 cell gets one of six seeded patterns."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:SPRITE, 0:SPRITE]
    patterns = [
        (yy // 2 + xx // 2) % 2,
        (yy // 4 + xx // 4) % 2,
        (yy // 2) % 2,
        (xx // 2) % 2,
        ((xx + yy) // 2) % 2,
        ((xx - yy) // 2) % 2,
    ]
    cells = size // SPRITE
    bg = np.empty((size, size, 3), dtype=np.uint8)
    kinds = rng.integers(0, len(patterns), size=(cells, cells))
    flips = rng.integers(0, 2, size=(cells, cells))
    for r in range(cells):
        for c in range(cells):
            pat = patterns[kinds[r, c]] ^ flips[r, c]
            bg[r * SPRITE:(r + 1) * SPRITE, c * SPRITE:(c + 1) * SPRITE] = PALETTE[pat]
    return bg


class _Mover:
    """A sprite bouncing between ``lo`` and ``hi`` along one axis."""

    __slots__ = ("x", "y", "axis", "speed", "lo", "hi", "direction")

    def __init__(self, x, y, axis, speed, lo, hi, direction):
        self.x, self.y, self.axis = x, y, axis
        self.speed, self.lo, self.hi, self.direction = speed, lo, hi, direction

    def advance(self) -> None:
        if self.speed == 0:
            return
        pos = (self.x if self.axis == 0 else self.y) + self.direction * self.speed
        if pos > self.hi:
            pos, self.direction = 2 * self.hi - pos, -1
        elif pos < self.lo:
            pos, self.direction = 2 * self.lo - pos, 1
        if self.axis == 0:
            self.x = pos
        else:
            self.y = pos


def _touch(ax, ay, bx, by) -> bool:
    return abs(ax - bx) < SPRITE and abs(ay - by) < SPRITE


class SpritesEnv(Env):
    action_count = len(ACTION_NAMES)

    def __init__(self, config: SpritesConfig | None = None):
        self.config = config or SpritesConfig()
        n = self.config.size
        self.frame_shape = (n, n, 3)
        self._background = render_background(n, self.config.background_seed)
        self._rng: np.random.Generator | None = None
        self.done = True
        self.t = 0
        self.player = (0, 0)
        self.collectibles: list[_Mover] = []
        self.hazards: list[_Mover] = []

    # -- geometry -----------------------------------------------------------
    @property
    def _hi(self) -> int:
        return self.config.size - SPRITE

    def _lattice_point(self) -> tuple[int, int]:
        slots = self._hi // LATTICE + 1
        x, y = self._rng.integers(0, slots, size=2)
        return int(x) * LATTICE, int(y) * LATTICE

    def _far_point(self, min_gap: int) -> tuple[int, int]:
        px, py = self.player
        for _ in range(1000):
            x, y = self._lattice_point()
            if max(abs(x - px), abs(y - py)) >= min_gap:
                return x, y
        return x, y

    def _spawn(self, speed: int, min_gap: int) -> _Mover:
        x, y = self._far_point(min_gap)
        axis = int(self._rng.integers(0, 2))
        direction = 1 if self._rng.integers(0, 2) else -1
        return _Mover(x, y, axis, speed, 0, self._hi, direction)

    # -- Env API ---------------------------------------------------------------
    def reset(self, seed: int) -> np.ndarray:
        cfg = self.config
        self._rng = np.random.default_rng(seed)
        self.t = 0
        self.done = False
        self.player = self._lattice_point()
        self.hazards = [self._spawn(cfg.hazard_speed, 3 * SPRITE) for _ in range(cfg.n_hazards)]
        self.collectibles = [self._spawn(cfg.collectible_speed, 2 * SPRITE) for _ in range(cfg.n_collectibles)]
        return self.render()

    def step(self, action: int) -> StepResult:
        if self.done:
            raise EnvError("step() called on a finished episode; call reset()")
        a = self._check_action(action)
        cfg = self.config
        dx, dy = _MOVES[a]
        px = min(max(self.player[0] + dx * cfg.player_speed, 0), self._hi)
        py = min(max(self.player[1] + dy * cfg.player_speed, 0), self._hi)
        self.player = (px, py)
        for m in self.hazards + self.collectibles:
            m.advance()

        reward = 0.0
        for i, c in enumerate(self.collectibles):
            if _touch(px, py, c.x, c.y):
                reward += 1.0
                self.collectibles[i] = self._spawn(cfg.collectible_speed, 2 * SPRITE)
        hit = any(_touch(px, py, h.x, h.y) for h in self.hazards)
        if hit:
            reward -= 1.0
        self.t += 1
        self.done = hit or self.t >= cfg.step_cap
        info = {"hazard": hit, "t": self.t, "life_lost": hit}
        return self.render(), reward, self.done, info

    # -- rendering -------------------------------------------------------------
    def background(self) -> np.ndarray:
        return self._background.copy()

    def sprite_boxes(self) -> list[tuple[str, int, int]]:
        """(kind, x, y) of every sprite currently on screen, in draw order."""
        out = [("collectible", c.x, c.y) for c in self.collectibles]
        out += [("hazard", h.x, h.y) for h in self.hazards]
        out.append(("player", *self.player))
        return out

    def render(self) -> np.ndarray:
        frame = self._background.copy()
        for kind, x, y in self.sprite_boxes():
            tile = frame[y:y + SPRITE, x:x + SPRITE]
            if kind == "collectible":
                tile[COLLECTIBLE_MASK] = COLLECTIBLE_COLOR
            elif kind == "hazard":
                tile[HAZARD_MASK] = HAZARD_COLOR
            else:
                tile[PLAYER_MASK] = PLAYER_COLOR
                tile[PLAYER_CORE_MASK] = PLAYER_CORE
        return frame

    def sprite_patch_mask(self, p: int = 8) -> np.ndarray:
        """Boolean (P, P) grid: True where a patch overlaps any sprite pixel."""
        P = self.config.size // p
        occ = np.zeros((self.config.size, self.config.size), dtype=bool)
        for kind, x, y in self.sprite_boxes():
            mask = {"collectible": COLLECTIBLE_MASK, "hazard": HAZARD_MASK}.get(kind, PLAYER_MASK)
            occ[y:y + SPRITE, x:x + SPRITE] |= mask
        return occ.reshape(P, p, P, p).any(axis=(1, 3))
