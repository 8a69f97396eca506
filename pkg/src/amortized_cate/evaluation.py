"""
Estimation-quality and policy-value metrics.

PEHE and relative ATE error need ground truth; the Qini curve only needs an
RCT and a ranking. ``qini_curve`` supports two readings of the uplift
functional ``lambda(q)``:

* ``form="mean"`` (default): prefix difference of inverse-rate-weighted
  outcomes divided by the prefix size, i.e. the uplift estimate of the top-q
  units. A random ranking then traces the diagonal.
* ``form="sum"``: the same prefix sum without the division. ``Q(q)`` then
  scales like ``q^2`` under a random ranking.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from sklearn.model_selection import StratifiedKFold

log = logging.getLogger(__name__)

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


class MetricError(ValueError):
    pass


def pehe(tau_hat, tau_true) -> float:
    """Root mean squared deviation between predicted and true CATEs."""
    tau_hat = np.asarray(tau_hat, dtype=np.float64)
    tau_true = np.asarray(tau_true, dtype=np.float64)
    if tau_hat.shape != tau_true.shape or tau_hat.size == 0:
        raise MetricError("tau_hat and tau_true must be non-empty and of equal length")
    return float(np.sqrt(np.mean((tau_hat - tau_true) ** 2)))


def ate_rel_error(lambda_hat: float, lambda_true: float) -> float:
    if lambda_true == 0:
        raise MetricError("relative ATE error is undefined for a zero true ATE")
    return abs(lambda_hat - lambda_true) / abs(lambda_true)


@dataclass(frozen=True)
class QiniCurve:
    q_grid: NDArray[np.float64]
    Q: NDArray[np.float64]
    lambda_q: NDArray[np.float64]
    degenerate: NDArray[np.bool_]
    lambda_full: float

    @property
    def qini_score(self) -> float:
        return qini_score(self)


def default_q_grid(n_points: int = 100) -> NDArray[np.float64]:
    return np.arange(1, n_points + 1) / n_points


def qini_curve(y, t, tau_hat, q_grid=None, form: str = "mean") -> QiniCurve:
    """Normalized Qini curve of an RCT ranked by ``tau_hat`` (descending, ties by index)."""
    y = np.asarray(y, dtype=np.float64)
    t = np.asarray(t)
    tau_hat = np.asarray(tau_hat, dtype=np.float64)
    if not (len(y) == len(t) == len(tau_hat)) or len(y) == 0:
        raise MetricError("y, t and tau_hat must be non-empty and of equal length")
    if not np.all(np.isin(t, (0, 1))):
        raise MetricError("treatments must be 0 or 1")
    if t.min() == t.max():
        raise MetricError("the Qini curve needs both treatment arms")
    if form not in ("mean", "sum"):
        raise ValueError(f"unknown form {form!r}")
    q_grid = default_q_grid() if q_grid is None else np.asarray(q_grid, dtype=np.float64)
    if np.any((q_grid <= 0) | (q_grid > 1)) or np.any(np.diff(q_grid) <= 0):
        raise ValueError("q_grid must be increasing within (0, 1]")

    n = len(y)
    order = np.argsort(-tau_hat, kind="stable")
    ts = t[order].astype(np.float64)
    ys = y[order]
    cum_t = np.concatenate([[0.0], np.cumsum(ts)])
    cum_ty = np.concatenate([[0.0], np.cumsum(ts * ys)])
    cum_cy = np.concatenate([[0.0], np.cumsum((1 - ts) * ys)])

    def lam(k: int):
        if k == 0:
            return np.nan
        r = cum_t[k] / k
        if r <= 0.0 or r >= 1.0:
            return np.nan
        total = cum_ty[k] / r - cum_cy[k] / (1.0 - r)
        return total / k if form == "mean" else total

    lambda_full = lam(n)
    if not np.isfinite(lambda_full) or lambda_full == 0:
        raise MetricError("overall uplift is zero; the normalized Qini curve is undefined")
    ks = np.floor(q_grid * n + 1e-9).astype(int)
    lams = np.array([lam(k) for k in ks])
    degenerate = ~np.isfinite(lams)
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} Qini prefixes contain a single treatment arm; set to 0",
                      RuntimeWarning, stacklevel=2)
    Q = np.where(degenerate, 0.0, q_grid * np.where(degenerate, 0.0, lams) / lambda_full)
    if q_grid[-1] == 1.0:
        Q[-1] = 1.0 * lams[-1] / lambda_full
    return QiniCurve(q_grid, Q, lams, degenerate, float(lambda_full))


def qini_score(curve: QiniCurve) -> float:
    """Trapezoidal area under ``Q`` over ``[0, q_max]``, anchored at ``Q(0) = 0``."""
    q = np.concatenate([[0.0], curve.q_grid])
    Q = np.concatenate([[0.0], curve.Q])
    return float(_trapezoid(Q, q))


def _binarize(y: NDArray) -> NDArray[np.int64]:
    if np.all(np.isin(y, (0, 1))):
        return y.astype(np.int64)
    return (y > np.median(y)).astype(np.int64)


def stratified_kfold(y, t, k: int, seed: int = 0, stratify_outcome: bool = True):
    """``k`` (train, test) splits stratified jointly on (binarized y, t).

    Falls back to stratifying on ``t`` alone when a joint stratum has fewer
    than ``k`` rows.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    t = np.asarray(t).astype(np.int64)
    labels = t.copy()
    if stratify_outcome:
        joint = 2 * _binarize(np.asarray(y, dtype=np.float64)) + t
        _, counts = np.unique(joint, return_counts=True)
        if counts.min() >= k:
            labels = joint
        else:
            warnings.warn("a (y, t) stratum is smaller than k; stratifying on treatment only",
                          RuntimeWarning, stacklevel=2)
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=int(seed) % 2**32)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return [(np.sort(tr), np.sort(te)) for tr, te in splitter.split(np.zeros(len(t)), labels)]
