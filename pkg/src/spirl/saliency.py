"""Reconstruction-error saliency and salient-patch selection.

Errors are flattened in raster order.  Every sort here is descending by error
with ties broken by raster index (the earlier patch wins), so selections are
stable and reproducible.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Literal, Sequence

import numpy as np

from .mae import MAE, normalize_patch, patchify

log = logging.getLogger(__name__)

KneeRule = Literal["mean_threshold", "argmin_slope"]
KNEE_RULES: tuple[str, ...] = ("mean_threshold", "argmin_slope")
PadMode = Literal["zero_pad", "trainable_pad", "masked_attention"]
PAD_MODES: tuple[str, ...] = ("zero_pad", "trainable_pad", "masked_attention")
MR_GRID_PCT: tuple[int, ...] = tuple(range(5, 100, 5))


# -- error maps -------------------------------------------------------------


def error_maps(frames, reconstructor: MAE | Callable[[np.ndarray], np.ndarray], p: int | None = None) -> np.ndarray:
    """Per-patch reconstruction errors, shape (B, P, P).

    ``reconstructor`` is a trained :class:`MAE` (patches are predicted from their
    surroundings) or any callable mapping frames (B, h, w, c) to predicted
    normalized patches (B, N, p*p*c).  Each entry is the mean squared
    difference between the normalized patch and its prediction.
    """
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[None]
    if isinstance(reconstructor, MAE):
        p = reconstructor.config.frame.p
        pred = reconstructor.reconstruct_all_from_surroundings(frames)
    else:
        if p is None:
            raise ValueError("patch size p is required with a callable reconstructor")
        pred = np.asarray(reconstructor(frames))
    target, _, _ = normalize_patch(patchify(frames.astype(np.float64), p))
    err = ((target - pred.astype(np.float64)) ** 2).mean(axis=-1)
    P = int(round(math.sqrt(err.shape[-1])))
    return err.reshape(-1, P, P)


def error_map(frame, reconstructor, p: int | None = None) -> np.ndarray:
    """Error map (P, P) of a single frame; see :func:`error_maps`."""
    return error_maps(np.asarray(frame)[None], reconstructor, p)[0]


# -- Lorenz curve --------------------------------------------------------------


def descending_order(errors) -> np.ndarray:
    """Raster indices sorted by error, largest first, raster tie-break."""
    flat = np.asarray(errors, dtype=np.float64).ravel()
    return np.argsort(-flat, kind="stable")


@dataclass
class SaliencyCurve:
    """Normalized cumulative error curve of an error map.

    ``x[k] = k / N`` and ``y[k]`` is the share of total error held by the ``k``
    largest patches, ``k = 0..N``.  The ascending-order distribution ``F``,
    its quantile function and its integral (the absolute Lorenz curve) are
    exposed as methods.
    """

    errors_desc: np.ndarray
    order: np.ndarray
    x: np.ndarray
    y: np.ndarray
    increments: np.ndarray

    @property
    def n(self) -> int:
        return self.errors_desc.size

    @property
    def total(self) -> float:
        return float(self.errors_desc.sum())

    def cdf(self, value: float) -> float:
        """F(value): fraction of patches with error <= value."""
        return float(np.count_nonzero(self.errors_desc <= value)) / self.n

    def quantile(self, prob: float) -> float:
        """Left-continuous inverse of F for prob in (0, 1]."""
        if not 0.0 < prob <= 1.0:
            raise ValueError("quantile level must lie in (0, 1]")
        asc = self.errors_desc[::-1]
        return float(asc[max(math.ceil(prob * self.n - 1e-12), 1) - 1])

    def absolute_lorenz(self, frac: float) -> float:
        """Integral of the quantile function from 0 to ``frac`` (piecewise linear)."""
        asc = self.errors_desc[::-1]
        pos = min(max(frac, 0.0), 1.0) * self.n
        whole = int(math.floor(pos))
        acc = float(asc[:whole].sum())
        if whole < self.n:
            acc += (pos - whole) * float(asc[whole])
        return acc / self.n

    def share_of_top(self, frac: float) -> float:
        """Share of total error in the top ``frac`` of patches (the plotted curve)."""
        mean = self.absolute_lorenz(1.0)
        if mean == 0.0:
            return frac
        return (mean - self.absolute_lorenz(1.0 - frac)) / mean


def lorenz_curve(errors) -> SaliencyCurve:
    flat = np.asarray(errors, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("empty error map")
    if np.any(flat < 0) or not np.all(np.isfinite(flat)):
        raise ValueError("error map entries must be finite and non-negative")
    order = descending_order(flat)
    desc = flat[order]
    n = desc.size
    total = desc.sum()
    if total > 0:
        inc = desc / total
    else:
        inc = np.full(n, 1.0 / n)
    y = np.concatenate([[0.0], np.cumsum(inc)])
    y[-1] = 1.0
    return SaliencyCurve(desc, order, np.arange(n + 1) / n, y, inc)


# -- selection ----------------------------------------------------------------


@dataclass
class SelectionResult:
    positions: list[tuple[int, int]]
    indices: np.ndarray
    errors: np.ndarray
    k: int
    n: int
    rule: str

    @property
    def p_star(self) -> float:
        return self.k / self.n


def _result(flat: np.ndarray, order: np.ndarray, k: int, P: int, rule: str) -> SelectionResult:
    idx = order[:k]
    return SelectionResult(
        positions=[(int(i) // P, int(i) % P) for i in idx],
        indices=idx.copy(),
        errors=flat[idx].copy(),
        k=k,
        n=flat.size,
        rule=rule,
    )


def _grid_side(errors: np.ndarray) -> int:
    errors = np.asarray(errors)
    if errors.ndim == 2:
        return errors.shape[1]
    P = int(round(math.sqrt(errors.size)))
    if P * P != errors.size:
        raise ValueError(f"{errors.size} errors do not form a square grid")
    return P


def count_above_mean(flat: np.ndarray) -> int:
    """#{e > mean(e)}, decided in exact rational arithmetic."""
    total = sum(Fraction(float(e)) for e in flat)
    n = flat.size
    return sum(1 for e in flat if Fraction(float(e)) * n > total)


def closest_unit_slope(desc: np.ndarray) -> int:
    """1-based step whose slope e*N/sum(e) is nearest 1, earliest on ties, in exact arithmetic."""
    vals = [Fraction(float(e)) for e in desc]
    total = sum(vals)
    n = len(vals)
    # |e*N/total - 1| ordered like |e*N - total| since total > 0
    gaps = [abs(v * n - total) for v in vals]
    return gaps.index(min(gaps)) + 1


def dynamic_k_select(errors, knee_rule: str = "mean_threshold") -> SelectionResult:
    """Pick a frame-dependent number of salient patches at the 45-degree knee.

    On the normalized descending curve, step ``k`` has slope
    ``s_k = e_(k) / mean(e)``.  ``mean_threshold`` keeps every step steeper than
    45 degrees (errors strictly above the mean); ``argmin_slope`` stops at the
    step whose slope is closest to 1 (earliest on ties).  At least one patch is
    always returned.
    """
    flat = np.asarray(errors, dtype=np.float64).ravel()
    P = _grid_side(errors)
    order = descending_order(flat)
    total = flat.sum()
    if total <= 0:
        log.warning("all-zero error map; selecting the first patch only")
        return _result(flat, order, 1, P, knee_rule)
    if knee_rule == "mean_threshold":
        k = count_above_mean(flat)
    elif knee_rule == "argmin_slope":
        k = closest_unit_slope(flat[order])
    else:
        raise ValueError(f"unknown knee rule {knee_rule!r}; expected one of {KNEE_RULES}")
    return _result(flat, order, max(k, 1), P, knee_rule)


def top_k_select(errors, k: int) -> SelectionResult:
    flat = np.asarray(errors, dtype=np.float64).ravel()
    if not 1 <= k <= flat.size:
        raise ValueError(f"K must lie in [1, {flat.size}], got {k}")
    return _result(flat, descending_order(flat), k, _grid_side(errors), "fixed_k")


# -- budget -------------------------------------------------------------------


def budget_size(ratio_pct: float, n_patches: int) -> int:
    """round(ratio * N) with halves rounded up, at least 1."""
    return max(int(math.floor(ratio_pct * n_patches / 100.0 + 0.5)), 1)


@dataclass(frozen=True)
class SelectionBudget:
    mr_pct: float
    n_patches: int

    def __post_init__(self):
        if not 0 < self.mr_pct <= 95:
            raise ValueError(f"maximal ratio must lie in (0, 95] percent, got {self.mr_pct}")

    @property
    def size(self) -> int:
        return budget_size(self.mr_pct, self.n_patches)


@dataclass
class BudgetedSelection:
    """Exactly ``B`` slots: real patches first (descending error), pads last."""

    indices: np.ndarray  # raster index per slot, -1 for pads
    errors: np.ndarray
    is_pad: np.ndarray
    pad_mode: str
    dropped: int

    @property
    def n_real(self) -> int:
        return int((~self.is_pad).sum())


def apply_budget(selection: SelectionResult, budget: SelectionBudget | int, pad_mode: str = "zero_pad") -> BudgetedSelection:
    if pad_mode not in PAD_MODES:
        raise ValueError(f"unknown pad mode {pad_mode!r}; expected one of {PAD_MODES}")
    B = budget.size if isinstance(budget, SelectionBudget) else int(budget)
    if B < 1:
        raise ValueError("budget must hold at least one slot")
    keep = min(selection.k, B)
    idx = np.full(B, -1, dtype=np.int64)
    err = np.zeros(B, dtype=np.float64)
    idx[:keep] = selection.indices[:keep]
    err[:keep] = selection.errors[:keep]
    pad = np.arange(B) >= keep
    return BudgetedSelection(idx, err, pad, pad_mode, dropped=selection.k - keep)


# -- maximal ratio ------------------------------------------------------------


def estimate_mr(counts: Sequence[int], n_patches: int, coverage: float = 0.999) -> tuple[int, list[int]]:
    """Smallest grid ratio (percent) keeping every salient patch on >= ``coverage`` of frames.

    Returns ``(mr_star, candidates)`` where candidates are mr*-5, mr*, mr*+5
    clipped to the 5..95 grid.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size == 0:
        raise ValueError("need at least one salient count")
    mr_star = MR_GRID_PCT[-1]
    for pct in MR_GRID_PCT:
        kept = np.count_nonzero(counts <= budget_size(pct, n_patches))
        # kept / total >= coverage, compared without float division
        if Fraction(int(kept), int(counts.size)) >= Fraction(coverage).limit_denominator(10**9):
            mr_star = pct
            break
    lo, hi = MR_GRID_PCT[0], MR_GRID_PCT[-1]
    cands = sorted({min(max(mr_star + d, lo), hi) for d in (-5, 0, 5)})
    return mr_star, cands


def salient_counts(maps: np.ndarray, knee_rule: str = "mean_threshold") -> np.ndarray:
    return np.array([dynamic_k_select(m, knee_rule).k for m in np.asarray(maps)], dtype=np.int64)
