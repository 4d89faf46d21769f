"""One-sided two-sample Kolmogorov-Smirnov testing and breaking-point detection.

Direction convention: the null hypothesis is "the method performs better than
the baseline". The statistic is D = sup_x [F_method(x) - F_baseline(x)]; a
large positive D means the method's values sit stochastically below the
baseline's, which is evidence against the null. Rejecting at p <= alpha
therefore certifies the method is NOT better, and the breaking point of a
method over an ascending bias grid is the largest (weakest-bias) level at
which that rejection still happens.

Both empirical distribution functions are evaluated right-continuously at
every point of the merged sorted support, so ties between and within samples
are handled identically by the asymptotic formula and the permutation oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TrialSamples",
    "BreakingPointReport",
    "ks_one_sided",
    "ks_permutation_p",
    "detect_breaking_point",
]

ALPHA_DEFAULT = 0.05


@dataclass(frozen=True)
class TrialSamples:
    """Per-trial accuracies for one method at one bias level."""

    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float).ravel()
        if vals.size < 2:
            raise ValueError(f"need at least 2 trial values, got {vals.size}")
        if vals.min() < 0.0 or vals.max() > 1.0:
            raise ValueError("accuracies must lie in [0, 1]")
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return self.values.size


def _as_values(sample) -> np.ndarray:
    vals = np.asarray(getattr(sample, "values", sample), dtype=float).ravel()
    if vals.size < 1:
        raise ValueError("empty sample")
    return vals


def _statistic_on_sorted(labels_sorted: np.ndarray, group_ends: np.ndarray, n: int, m: int) -> float:
    """D for one labelling of the pooled sorted values; labels are 1 for 'method'."""
    cum_method = np.cumsum(labels_sorted)
    cum_all = np.arange(1, labels_sorted.size + 1)
    f_method = cum_method[group_ends] / n
    f_baseline = (cum_all[group_ends] - cum_method[group_ends]) / m
    return float(np.max(f_method - f_baseline))


def _pooled_layout(method_vals: np.ndarray, baseline_vals: np.ndarray):
    pooled = np.concatenate([method_vals, baseline_vals])
    labels = np.concatenate([np.ones(method_vals.size, dtype=np.int64), np.zeros(baseline_vals.size, dtype=np.int64)])
    order = np.argsort(pooled, kind="stable")
    pooled_sorted = pooled[order]
    # Evaluate ECDF differences only at the last index of each tie group.
    is_group_end = np.ones(pooled_sorted.size, dtype=bool)
    is_group_end[:-1] = pooled_sorted[1:] != pooled_sorted[:-1]
    return labels[order], np.flatnonzero(is_group_end)


def ks_one_sided(method, baseline) -> tuple[float, float]:
    """One-sided two-sample KS statistic and its asymptotic p-value.

    D = sup over the merged support of [F_method - F_baseline], and
    p = exp(-2 D^2 nm / (n+m)) clamped to [0, 1]. D = 0 (p = 1) when the
    method's sample dominates the baseline's everywhere.
    """
    m_vals = _as_values(method)
    b_vals = _as_values(baseline)
    if m_vals.size < 2 or b_vals.size < 2:
        raise ValueError("both samples need at least 2 values")
    labels_sorted, ends = _pooled_layout(m_vals, b_vals)
    n, m = m_vals.size, b_vals.size
    d = max(_statistic_on_sorted(labels_sorted, ends, n, m), 0.0)
    p = float(np.exp(-2.0 * d * d * n * m / (n + m)))
    return d, min(max(p, 0.0), 1.0)


def ks_permutation_p(method, baseline, resamples: int = 100_000, seed: int = 0) -> float:
    """Monte-Carlo permutation p-value for the same one-sided statistic.

    The small-sample oracle for the asymptotic formula: group labels are
    reassigned uniformly at random `resamples` times and the add-one-smoothed
    exceedance rate of D is returned. Deterministic per seed.
    """
    if resamples < 1000:
        raise ValueError(f"resamples must be >= 1000, got {resamples}")
    m_vals = _as_values(method)
    b_vals = _as_values(baseline)
    labels_sorted, ends = _pooled_layout(m_vals, b_vals)
    n, m = m_vals.size, b_vals.size
    d_observed = _statistic_on_sorted(labels_sorted, ends, n, m)

    rng = np.random.default_rng(seed)
    base = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(m, dtype=np.int64)])
    perms = rng.permuted(np.tile(base, (resamples, 1)), axis=1)
    cum_method = np.cumsum(perms, axis=1)[:, ends]
    cum_all = (ends + 1)[None, :]
    d_perm = np.max(cum_method / n - (cum_all - cum_method) / m, axis=1)
    exceed = int(np.count_nonzero(d_perm >= d_observed - 1e-12))
    return float((1 + exceed) / (1 + resamples))


def detect_breaking_point(grid, p_values, alpha: float = ALPHA_DEFAULT):
    """Largest bias level at which the method is rejected as not-better.

    Returns None when no level rejects. The grid must be strictly ascending.
    """
    grid = np.asarray(grid, dtype=float).ravel()
    p_values = np.asarray(p_values, dtype=float).ravel()
    if grid.size != p_values.size:
        raise ValueError(f"grid has {grid.size} levels but {p_values.size} p-values given")
    if grid.size == 0:
        raise ValueError("empty grid")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly ascending")
    rejected = np.flatnonzero(p_values <= alpha)
    if rejected.size == 0:
        return None
    return float(grid[rejected.max()])


@dataclass(frozen=True)
class BreakingPointReport:
    """Per-method rejection grid and the detected breaking point."""

    method: str
    grid: np.ndarray
    p_values: np.ndarray
    breaking_point: float | None
    alpha: float = ALPHA_DEFAULT
    statistics: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        grid = np.asarray(self.grid, dtype=float).ravel()
        p_values = np.asarray(self.p_values, dtype=float).ravel()
        if grid.size != p_values.size:
            raise ValueError("grid and p_values must have equal length")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly ascending")
        if np.any((p_values < 0.0) | (p_values > 1.0)):
            raise ValueError("p-values must lie in [0, 1]")
        if self.breaking_point is not None and self.breaking_point not in grid:
            raise ValueError("breaking_point must be one of the grid levels")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "p_values", p_values)

    def to_json_obj(self) -> dict:
        return {
            "method": self.method,
            "grid": self.grid.tolist(),
            "p_values": self.p_values.tolist(),
            "breaking_point": self.breaking_point,
            "alpha": self.alpha,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), sort_keys=True)

    def csv_rows(self) -> list[str]:
        rows = []
        for level, p in zip(self.grid, self.p_values):
            rejected = "1" if p <= self.alpha else "0"
            rows.append(f"{self.method},{level!r},{p!r},{rejected}")
        return rows

    @classmethod
    def from_p_values(
        cls, method: str, grid, p_values, alpha: float = ALPHA_DEFAULT
    ) -> "BreakingPointReport":
        return cls(
            method=method,
            grid=np.asarray(grid, dtype=float),
            p_values=np.asarray(p_values, dtype=float),
            breaking_point=detect_breaking_point(grid, p_values, alpha),
            alpha=alpha,
        )
