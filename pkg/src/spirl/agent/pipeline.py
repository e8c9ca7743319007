from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from ..mae import MAE
from ..saliency import SelectionBudget, apply_budget, dynamic_k_select, error_maps, top_k_select
from .aggregator import SalientSet


@dataclass
class ProcessedFrame:
    salient: SalientSet
    k: int
    errors: np.ndarray  # (P, P)


class SaliencyPipeline:
    """Frame -> error map -> salient selection -> budgeted set of encoder embeddings.

    Embeddings are the frozen encoder's outputs with every patch visible, read at
    the selected positions.  Results are cached by frame content (LRU), which pays
    off in games where many frames repeat.
    """

    def __init__(
        self,
        mae: MAE,
        knee_rule: str = "mean_threshold",
        mr_pct: float = 30.0,
        fixed_k: int | None = None,
        pad_mode: str = "zero_pad",
        cache_size: int = 4096,
    ):
        self.mae = mae
        self.knee_rule = knee_rule
        self.fixed_k = fixed_k
        self.pad_mode = pad_mode
        self.budget = SelectionBudget(mr_pct, mae.config.frame.n_patches)
        self.cache_size = cache_size
        self._cache: OrderedDict[bytes, ProcessedFrame] = OrderedDict()

    @property
    def slots(self) -> int:
        return self.budget.size

    @property
    def emb_dim(self) -> int:
        return self.mae.config.enc_dim

    def _as_float(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames)
        if frames.dtype == np.uint8:
            return frames.astype(np.float32) / np.float32(255.0)
        return frames.astype(np.float32)

    def process(self, frame: np.ndarray) -> ProcessedFrame:
        key = np.ascontiguousarray(frame).tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        out = self.process_batch(np.asarray(frame)[None])[0]
        self._cache[key] = out
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return out

    def process_batch(self, frames: np.ndarray) -> list[ProcessedFrame]:
        x = self._as_float(frames)
        maps = error_maps(x, self.mae)
        emb = self.mae.embed(x)
        out = []
        for e, z in zip(maps, emb):
            if self.fixed_k is None:
                sel = dynamic_k_select(e, self.knee_rule)
            else:
                sel = top_k_select(e, self.fixed_k)
            bs = apply_budget(sel, self.budget, self.pad_mode)
            vecs = np.zeros((bs.indices.size, self.emb_dim), dtype=np.float32)
            real = ~bs.is_pad
            vecs[real] = z[bs.indices[real]]
            out.append(ProcessedFrame(SalientSet(vecs, bs.indices.astype(np.int32)), sel.k, e))
        return out
