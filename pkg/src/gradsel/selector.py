"""Density-based subset selection over per-instance gradient magnitudes.

The core idea: fit a Gaussian KDE to the scalar gradient magnitudes and keep
the instances whose magnitude sits in the densest region. High-density values
are "typical" for the corpus; both extremes (noise-driven spikes, memorized
near-duplicates) live in the thin tails and get dropped. Several rank- and
normalization-based variants of the same pipeline are provided for ablation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .gradstats import GradientRecord

STRATEGIES = (
    "grads",
    "emb_only",
    "lm_only",
    "top_grad",
    "tail_grad",
    "mid_grad",
    "weight",
    "weightr",
)

TIE_BREAK = "f_desc_then_dataset_index"


@dataclass(frozen=True)
class DensityScore:
    instance_id: str
    f_value: float


@dataclass(frozen=True)
class SelectionResult:
    strategy: str
    fraction_percent: float
    selected_ids: tuple[str, ...]      # dataset order
    ordered_ids: tuple[str, ...]       # rank order (best first)
    f_values: dict[str, float]
    bandwidth: float | None
    tie_break: str = TIE_BREAK
    seed: int | None = None
    stratum_counts: dict[str, int] | None = None


def subset_size(k: int, percent: float) -> int:
    """max(1, round-half-up of k * percent / 100), exact for decimal percents."""
    if k < 1:
        raise ValueError("need at least one instance")
    if not 0 < percent <= 100:
        raise ValueError("percent must lie in (0, 100]")
    frac = Fraction(str(percent)) * k / 100
    return max(1, math.floor(frac + Fraction(1, 2)))


def silverman_bandwidth(values: list[float] | np.ndarray) -> float:
    """0.9 * min(sample std, IQR/1.34) * n^(-1/5) with type-7 quartiles."""
    x = np.asarray(values, dtype=float)
    n = x.size
    if n < 2:
        raise ValueError("bandwidth needs at least two values")
    std = float(np.std(x, ddof=1))
    q1, q3 = np.percentile(x, [25, 75])  # linear interpolation (type 7)
    iqr = float(q3 - q1)
    spread = min(std, iqr / 1.34) if iqr > 0 else std
    if spread <= 0:
        raise ValueError("zero-spread gradients")
    return 0.9 * spread * n ** (-0.2)


def kde_density(values: list[float] | np.ndarray, h: float,
                xs: list[float] | np.ndarray) -> np.ndarray:
    """Gaussian KDE fitted on values, evaluated at the points xs."""
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    x = np.asarray(values, dtype=float)
    pts = np.asarray(xs, dtype=float)
    z = (pts[:, None] - x[None, :]) / h
    return np.exp(-0.5 * z * z).sum(axis=1) / (x.size * h * math.sqrt(2.0 * math.pi))


def kde_scores(values: list[float] | np.ndarray, h: float,
               ids: list[str] | None = None) -> list[DensityScore]:
    """Gaussian KDE evaluated at every sample point, self-term included."""
    x = np.asarray(values, dtype=float)
    if ids is None:
        ids = [str(i) for i in range(x.size)]
    dens = kde_density(x, h, x)
    return [DensityScore(i, float(f)) for i, f in zip(ids, dens)]


def _order_by_density(scores: list[DensityScore]) -> list[int]:
    return sorted(range(len(scores)), key=lambda i: (-scores[i].f_value, i))


def select_top_density(scores: list[DensityScore], percent: float,
                       strategy: str = "grads",
                       bandwidth: float | None = None) -> SelectionResult:
    """Keep the densest percent, ties broken by dataset position."""
    if not scores:
        raise ValueError("no scores to select from")
    size = subset_size(len(scores), percent)
    order = _order_by_density(scores)
    chosen = order[:size]
    rejected = order[size:]
    if rejected:
        worst_kept = min(scores[i].f_value for i in chosen)
        best_dropped = max(scores[i].f_value for i in rejected)
        assert worst_kept >= best_dropped
    selected_ids = tuple(scores[i].instance_id for i in sorted(chosen))
    return SelectionResult(
        strategy=strategy,
        fraction_percent=percent,
        selected_ids=selected_ids,
        ordered_ids=tuple(scores[i].instance_id for i in order[:size]),
        f_values={s.instance_id: s.f_value for s in scores},
        bandwidth=bandwidth,
    )


def _select_by_value_order(records: list[GradientRecord], percent: float,
                           strategy: str, window: str) -> SelectionResult:
    size = subset_size(len(records), percent)
    desc = sorted(range(len(records)), key=lambda i: (-records[i].g_grads, i))
    if window == "top":
        chosen = desc[:size]
    elif window == "tail":
        asc = sorted(range(len(records)), key=lambda i: (records[i].g_grads, i))
        chosen = asc[:size]
    else:  # centered on the median rank, symmetric, clipped by construction
        lo = (len(records) - size) // 2
        chosen = desc[lo : lo + size]
    return SelectionResult(
        strategy=strategy,
        fraction_percent=percent,
        selected_ids=tuple(records[i].instance_id for i in sorted(chosen)),
        ordered_ids=tuple(records[i].instance_id for i in chosen),
        f_values={records[i].instance_id: records[i].g_grads for i in range(len(records))},
        bandwidth=None,
    )


def minmax_unit(x: np.ndarray) -> np.ndarray:
    """Min-max map to [0, 1]; a constant vector maps to all zeros."""
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def weight_values(records: list[GradientRecord]) -> np.ndarray:
    """Per-instance z(g_emb) + z(g_lm) with min-max z."""
    ge = np.array([r.g_emb for r in records])
    gl = np.array([r.g_lm for r in records])
    return minmax_unit(ge) + minmax_unit(gl)


def descending_ranks(x: np.ndarray) -> np.ndarray:
    """Rank 1 = largest value; ties resolved by earlier index first."""
    order = sorted(range(x.size), key=lambda i: (-x[i], i))
    ranks = np.empty(x.size, dtype=float)
    for rank, i in enumerate(order, start=1):
        ranks[i] = rank
    return ranks


def weightr_values(records: list[GradientRecord]) -> np.ndarray:
    """Per-instance 1/rank(g_emb) + 1/rank(g_lm), descending ranks from 1."""
    ge = np.array([r.g_emb for r in records])
    gl = np.array([r.g_lm for r in records])
    return 1.0 / descending_ranks(ge) + 1.0 / descending_ranks(gl)


def select_strategy(records: list[GradientRecord], strategy: str,
                    percent: float) -> SelectionResult:
    """Dispatch over the ablation families; density variants share the KDE path."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if not records:
        raise ValueError("no records to select from")
    if strategy in ("top_grad", "tail_grad", "mid_grad"):
        return _select_by_value_order(records, percent, strategy,
                                      window=strategy.split("_")[0])
    if strategy == "grads":
        values = np.array([r.g_grads for r in records])
    elif strategy == "emb_only":
        values = np.array([r.g_emb for r in records])
    elif strategy == "lm_only":
        values = np.array([r.g_lm for r in records])
    elif strategy == "weight":
        values = weight_values(records)
    else:
        values = weightr_values(records)
    h = silverman_bandwidth(values)
    scores = kde_scores(values, h, ids=[r.instance_id for r in records])
    result = select_top_density(scores, percent, strategy=strategy, bandwidth=h)
    return result


def attach_strata(result: SelectionResult,
                  strata_by_id: dict[str, str | None]) -> SelectionResult:
    """Fill stratum_counts when generator provenance is available."""
    counts: dict[str, int] = {}
    for i in result.selected_ids:
        label = strata_by_id.get(i) or "unlabeled"
        counts[label] = counts.get(label, 0) + 1
    return SelectionResult(
        strategy=result.strategy,
        fraction_percent=result.fraction_percent,
        selected_ids=result.selected_ids,
        ordered_ids=result.ordered_ids,
        f_values=result.f_values,
        bandwidth=result.bandwidth,
        tie_break=result.tie_break,
        seed=result.seed,
        stratum_counts=counts,
    )
