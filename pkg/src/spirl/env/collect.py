from __future__ import annotations

import numpy as np

from .base import Env


def collect_frames(env: Env, n_frames: int, seed: int = 0) -> np.ndarray:
    """Frames seen by a uniform-random policy, episode after episode, as uint8 (n, h, w, c).

    Episode ``e`` is reset with seed ``seed + e``; reset frames are recorded too.
    """
    if n_frames < 1:
        raise ValueError("need at least one frame")
    rng = np.random.default_rng(seed)
    out = np.empty((n_frames, *env.frame_shape), dtype=np.uint8)
    episode = 0
    out[0] = env.reset(seed)
    done = False
    for k in range(1, n_frames):
        if done:
            episode += 1
            out[k] = env.reset(seed + episode)
            done = False
            continue
        out[k], _, done, _ = env.step(int(rng.integers(0, env.action_count)))
    return out
