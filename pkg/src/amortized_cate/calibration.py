"""
Coverage curves, integrated coverage error and temperature tuning.

Regression coverage is measured on held-out folds of the observational table
itself, so it needs no ground truth; CATE coverage needs the true effects of a
simulated DGP. Histogram logits are computed once per fold and reused for
every temperature, and all intervals share the same uniform variates, so
curves at different temperatures differ only through the temperature.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .evaluation import stratified_kfold
from .inference import equal_tailed, predict_arms, predict_ppds, sample_histograms
from .model import ModelState, PpdBatch
from .prior import DgpInstance, ObservationalTable

log = logging.getLogger(__name__)

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

DEFAULT_LEVELS = np.round(np.arange(1, 20) * 0.05, 10)
DEFAULT_TEMPERATURES = np.geomspace(0.25, 8.0, 25)
CALIBRATION_SAMPLES = 2000


@dataclass(frozen=True)
class CoverageCurve:
    levels: NDArray[np.float64]
    coverage: NDArray[np.float64]
    kind: str
    skipped_folds: tuple = field(default=())

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=np.float64)
        coverage = np.asarray(self.coverage, dtype=np.float64)
        if levels.ndim != 1 or levels.shape != coverage.shape:
            raise ValueError("levels and coverage must be 1-d and of equal length")
        if np.any(np.diff(levels) <= 0) or np.any((levels <= 0) | (levels >= 1)):
            raise ValueError("levels must be strictly increasing within (0, 1)")
        if np.any((coverage < 0) | (coverage > 1)):
            raise ValueError("coverage values must lie in [0, 1]")
        if self.kind not in ("regression", "cate"):
            raise ValueError(f"unknown curve kind {self.kind!r}")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "coverage", coverage)

    @property
    def ice(self) -> float:
        return ice(self)


def ice(curve: CoverageCurve) -> float:
    """Integrated ``coverage(level) - level`` over ``[0, 1]``.

    Trapezoid over the grid; beyond the first and last grid points the
    coverage is held flat. Negative values mean overconfidence.
    """
    u, c = curve.levels, curve.coverage
    if len(u) < 2:
        raise ValueError("ICE needs at least two grid points")
    inner = float(_trapezoid(c - u, u))
    left = c[0] * u[0] - u[0] ** 2 / 2
    right = c[-1] * (1 - u[-1]) - (1 - u[-1] ** 2) / 2
    return inner + left + right


def coverage_matrix(draws: NDArray, target: NDArray, levels) -> NDArray[np.bool_]:
    """(rows, levels) indicator that ``target`` lies in each equal-tailed interval."""
    lo, hi = equal_tailed(draws, 1.0 - np.asarray(levels, dtype=np.float64))
    target = np.asarray(target, dtype=np.float64)[:, None]
    return (lo <= target) & (target <= hi)


def _uniforms(seed: int, stream: int, n_rows: int, n_samples: int):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) % 2**64, stream]))
    return rng.random((n_rows, n_samples)), rng.random((n_rows, n_samples))


# ---------------------------------------------------------------------------
# regression coverage
# ---------------------------------------------------------------------------


@dataclass
class FoldPredictions:
    """Held-out histograms of one fold, ready to be re-tempered."""

    fold: int
    test_idx: NDArray[np.int64]
    y: NDArray[np.float64]
    ppds: PpdBatch
    u_bin: NDArray[np.float64]
    u_pos: NDArray[np.float64]

    def coverage(self, levels, theta_T: float) -> NDArray[np.bool_]:
        p = self.ppds.with_temperature(theta_T)
        draws = sample_histograms(p.probs, p.edges, self.u_bin, self.u_pos)
        return coverage_matrix(draws, self.y, levels)


def fold_predictions(state: ModelState, table: ObservationalTable, k_folds: int = 5,
                     n_samples: int = CALIBRATION_SAMPLES, seed: int = 0):
    """Per-fold held-out histograms; returns ``(folds, skipped_fold_indices)``."""
    if k_folds < 2:
        raise ValueError("k_folds must be at least 2")
    if table.n < 2 * k_folds:
        raise ValueError(f"table with {table.n} rows is too small for {k_folds} folds")
    folds, skipped = [], []
    for f, (train_idx, test_idx) in enumerate(stratified_kfold(table.y, table.t, k_folds, seed)):
        if len(np.unique(table.t[train_idx])) < 2 or len(np.unique(table.t[test_idx])) < 2:
            log.warning("fold %d has a single treatment arm; skipped", f)
            skipped.append(f)
            continue
        ctx = table.subset(train_idx)
        ppds = predict_ppds(state, ctx, table.t[test_idx], table.x[test_idx])
        u_bin, u_pos = _uniforms(seed, 100 + f, len(test_idx), n_samples)
        folds.append(FoldPredictions(f, test_idx, table.y[test_idx], ppds, u_bin, u_pos))
    if not folds:
        raise ValueError("every fold was skipped")
    return folds, tuple(skipped)


def _pooled_curve(folds: Sequence[FoldPredictions], levels, theta_T: float, skipped=()) -> CoverageCurve:
    hits = np.concatenate([f.coverage(levels, theta_T) for f in folds])
    return CoverageCurve(levels, hits.mean(axis=0), "regression", tuple(skipped))


def regression_coverage(state: ModelState, table: ObservationalTable, levels=DEFAULT_LEVELS,
                        k_folds: int = 5, n_samples: int = CALIBRATION_SAMPLES, seed: int = 0) -> CoverageCurve:
    """Fraction of held-out outcomes inside the credible interval of their own histogram."""
    folds, skipped = fold_predictions(state, table, k_folds, n_samples, seed)
    return _pooled_curve(folds, levels, state.theta_T, skipped)


# ---------------------------------------------------------------------------
# CATE coverage
# ---------------------------------------------------------------------------


def cate_coverage_from_arms(ppd0: PpdBatch, ppd1: PpdBatch, tau_true, levels=DEFAULT_LEVELS,
                            n_samples: int = CALIBRATION_SAMPLES, seed: int = 0,
                            theta_T: Optional[float] = None) -> CoverageCurve:
    if theta_T is not None:
        ppd0, ppd1 = ppd0.with_temperature(theta_T), ppd1.with_temperature(theta_T)
    m = len(ppd0)
    u0b, u0p = _uniforms(seed, 0, m, n_samples)
    u1b, u1p = _uniforms(seed, 1, m, n_samples)
    draws = (sample_histograms(ppd1.probs, ppd1.edges, u1b, u1p)
             - sample_histograms(ppd0.probs, ppd0.edges, u0b, u0p))
    hits = coverage_matrix(draws, tau_true, levels)
    return CoverageCurve(levels, hits.mean(axis=0), "cate")


def cate_coverage(state: ModelState, instance: DgpInstance, levels=DEFAULT_LEVELS,
                  n_samples: int = CALIBRATION_SAMPLES, seed: int = 0) -> CoverageCurve:
    """Fraction of units whose true CATE lies inside its credible interval."""
    table = instance.observational()
    ppd0, ppd1 = predict_arms(state, table, table.x)
    return cate_coverage_from_arms(ppd0, ppd1, instance.tau, levels, n_samples, seed)


# ---------------------------------------------------------------------------
# temperature search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TemperatureSearch:
    theta_T: float
    grid: NDArray[np.float64]
    ice_by_temperature: NDArray[np.float64]
    fold_ice: NDArray[np.float64]
    ice_before: float
    ice_after: float
    skipped_folds: tuple


def _select(grid: NDArray, mean_ice: NDArray) -> int:
    score = np.abs(mean_ice)
    best = score.min()
    ties = np.flatnonzero(score <= best + 1e-12)
    return int(ties[np.argmax(grid[ties])])


def search_temperature_folds(folds: Sequence[FoldPredictions], grid=DEFAULT_TEMPERATURES,
                             levels=DEFAULT_LEVELS, base_theta_T: float = 1.0,
                             skipped=()) -> TemperatureSearch:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0 or np.any(grid <= 0):
        raise ValueError("temperature grid must be a non-empty vector of positive values")
    fold_ice = np.array([[ice(CoverageCurve(levels, f.coverage(levels, T).mean(axis=0), "regression"))
                          for f in folds] for T in grid])
    mean_ice = fold_ice.mean(axis=1)
    k = _select(grid, mean_ice)
    before = float(np.mean([ice(CoverageCurve(levels, f.coverage(levels, base_theta_T).mean(axis=0),
                                              "regression")) for f in folds]))
    return TemperatureSearch(float(grid[k]), grid, mean_ice, fold_ice, before, float(mean_ice[k]),
                             tuple(skipped))


def search_temperature(state: ModelState, table: ObservationalTable, grid=DEFAULT_TEMPERATURES,
                       k_folds: int = 5, levels=DEFAULT_LEVELS, n_samples: int = CALIBRATION_SAMPLES,
                       seed: int = 0) -> TemperatureSearch:
    """Grid search of the softmax temperature with per-temperature fold ICEs."""
    folds, skipped = fold_predictions(state, table, k_folds, n_samples, seed)
    return search_temperature_folds(folds, grid, levels, state.theta_T, skipped)


def tune_temperature(state: ModelState, table: ObservationalTable, grid=DEFAULT_TEMPERATURES,
                     k_folds: int = 5, levels=DEFAULT_LEVELS, n_samples: int = CALIBRATION_SAMPLES,
                     seed: int = 0) -> float:
    """Grid temperature minimizing the fold-averaged |ICE|; ties go to the larger temperature."""
    return search_temperature(state, table, grid, k_folds, levels, n_samples, seed).theta_T


def interval_widths(ppds: PpdBatch, grid, alpha: float, n_samples: int = CALIBRATION_SAMPLES,
                    seed: int = 0) -> NDArray[np.float64]:
    """(temperatures, rows) credible-interval widths under common random numbers."""
    ub, up = _uniforms(seed, 0, len(ppds), n_samples)
    out = []
    for T in grid:
        p = ppds.with_temperature(float(T))
        lo, hi = equal_tailed(sample_histograms(p.probs, p.edges, ub, up), alpha)
        out.append(hi - lo)
    return np.array(out)
