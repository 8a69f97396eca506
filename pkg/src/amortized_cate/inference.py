"""
Point estimates, credible intervals and effect estimates from predicted histograms.

Sampling from a histogram draws a bin by its probability and a position
uniformly inside it. Uniform variates are generated once per ``(row, draw)``
so that intervals at different levels or temperatures share the same draws.

Tables larger than the model's context window are served by retrieval
windowing: rows and queries are sorted by a weak CATE estimate from a small
gradient-boosted tree ensemble, queries are cut into consecutive batches, and
each batch gets the contiguous context window whose weak-CATE range best
matches its own.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .model import ModelState, PpdBatch, QuantizedPpd, TokenBatch, predict_batch
from .prior import ObservationalTable

DEFAULT_SAMPLES = 10_000
_CHUNK = 256


class EstimationError(ValueError):
    pass


@dataclass(frozen=True)
class EffectEstimate:
    point: float
    lo: float
    hi: float
    alpha: float
    n_samples: int

    @property
    def interval(self) -> tuple[float, float]:
        return self.lo, self.hi


# ---------------------------------------------------------------------------
# histogram summaries and sampling
# ---------------------------------------------------------------------------


def ppd_mean(ppd: QuantizedPpd) -> float:
    return float(np.dot(ppd.probs, ppd.centers))


def ppd_means(ppds: PpdBatch) -> NDArray[np.float64]:
    return (ppds.probs * ppds.centers).sum(axis=1)


def uniform_draws(seed: int, n_rows: int, n_samples: int, stream: int = 0):
    """Common random numbers ``(u_bin, u_pos)``, each of shape (n_rows, n_samples)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) % 2**64, stream]))
    return rng.random((n_rows, n_samples)), rng.random((n_rows, n_samples))


def sample_histograms(probs, edges, u_bin, u_pos) -> NDArray[np.float64]:
    """Inverse-CDF draws from per-row histograms; returns (M, S)."""
    probs = np.atleast_2d(probs)
    edges = np.atleast_2d(edges)
    m, L = probs.shape
    cdf = np.cumsum(probs, axis=1)
    # offset each row by 2*i so one global searchsorted handles every row
    offs = 2.0 * np.arange(m)[:, None]
    idx = np.searchsorted((cdf + offs).ravel(), (u_bin + offs).ravel(), side="right").reshape(u_bin.shape)
    bins = np.minimum(idx - L * np.arange(m)[:, None], L - 1)
    left = np.take_along_axis(edges, bins, axis=1)
    right = np.take_along_axis(edges, bins + 1, axis=1)
    return left + u_pos * (right - left)


def equal_tailed(draws, alpha) -> tuple[NDArray, NDArray]:
    """Equal-tailed ``(alpha/2, 1-alpha/2)`` empirical quantiles along the last axis.

    ``alpha`` may be a scalar or a vector; the result then gains a trailing axis.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    qs = np.concatenate([np.atleast_1d(alpha / 2), np.atleast_1d(1 - alpha / 2)])
    qv = np.quantile(draws, qs, axis=-1)
    k = qs.size // 2
    lo, hi = qv[:k], qv[k:]
    lo = np.moveaxis(lo, 0, -1)
    hi = np.moveaxis(hi, 0, -1)
    if alpha.ndim == 0:
        lo, hi = lo[..., 0], hi[..., 0]
    return lo, hi


def credible_interval(ppd: QuantizedPpd, alpha: float, n_samples: int = DEFAULT_SAMPLES, seed: int = 0):
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    u_bin, u_pos = uniform_draws(seed, 1, n_samples)
    draws = sample_histograms(ppd.probs[None], ppd.edges[None], u_bin, u_pos)[0]
    lo, hi = equal_tailed(draws, alpha)
    return float(lo), float(hi)


def cate_draws(ppd0: PpdBatch, ppd1: PpdBatch, n_samples: int, seed: int, rows=None) -> NDArray[np.float64]:
    """Independent draws from both arms' histograms, differenced: (M, S)."""
    rows = np.arange(len(ppd0)) if rows is None else np.asarray(rows)
    u1b, u1p = _row_uniforms(seed, 1, rows, n_samples)
    u0b, u0p = _row_uniforms(seed, 0, rows, n_samples)
    d1 = sample_histograms(ppd1.probs[rows], ppd1.edges[rows], u1b, u1p)
    d0 = sample_histograms(ppd0.probs[rows], ppd0.edges[rows], u0b, u0p)
    return d1 - d0


def _row_uniforms(seed: int, stream: int, rows, n_samples: int):
    """Per-row uniform streams, so a row's draws do not depend on chunking."""
    out_b = np.empty((len(rows), n_samples))
    out_p = np.empty((len(rows), n_samples))
    for j, r in enumerate(rows):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) % 2**64, stream, int(r)]))
        out_b[j] = rng.random(n_samples)
        out_p[j] = rng.random(n_samples)
    return out_b, out_p


def histogram_draws(ppds: PpdBatch, n_samples: int, seed: int, rows=None, stream: int = 2):
    rows = np.arange(len(ppds)) if rows is None else np.asarray(rows)
    ub, up = _row_uniforms(seed, stream, rows, n_samples)
    return sample_histograms(ppds.probs[rows], ppds.edges[rows], ub, up)


# ---------------------------------------------------------------------------
# weak CATE via boosted trees
# ---------------------------------------------------------------------------


def _best_split(x: NDArray, r: NDArray):
    """Best (feature, threshold, gain) for a squared-loss split, or None."""
    n, p = x.shape
    total = r.sum()
    base = total * total / n
    best = None
    for j in range(p):
        order = np.argsort(x[:, j], kind="stable")
        xs = x[order, j]
        cs = np.cumsum(r[order])[:-1]
        n_left = np.arange(1, n)
        valid = xs[:-1] < xs[1:]
        if not valid.any():
            continue
        gain = cs**2 / n_left + (total - cs) ** 2 / (n - n_left) - base
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > 1e-12 * max(1.0, abs(base)) and (best is None or gain[i] > best[2]):
            best = (j, 0.5 * (xs[i] + xs[i + 1]), float(gain[i]))
    return best


def _fit_tree(x, r, depth):
    if depth == 0 or len(r) < 2:
        return float(r.mean())
    split = _best_split(x, r)
    if split is None:
        return float(r.mean())
    j, thr, _ = split
    left = x[:, j] <= thr
    return (j, thr, _fit_tree(x[left], r[left], depth - 1), _fit_tree(x[~left], r[~left], depth - 1))


def _predict_tree(node, x):
    if not isinstance(node, tuple):
        return np.full(x.shape[0], node)
    j, thr, lo, hi = node
    left = x[:, j] <= thr
    out = np.empty(x.shape[0])
    out[left] = _predict_tree(lo, x[left])
    out[~left] = _predict_tree(hi, x[~left])
    return out


@dataclass
class BoostedTrees:
    """Squared-loss gradient boosting over shallow trees (depth 1 = stumps)."""

    n_rounds: int = 50
    learning_rate: float = 0.1
    max_depth: int = 1

    def fit(self, x, y) -> "BoostedTrees":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.init_ = float(y.mean())
        self.trees_ = []
        pred = np.full(len(y), self.init_)
        for _ in range(self.n_rounds):
            tree = _fit_tree(x, y - pred, self.max_depth)
            self.trees_.append(tree)
            pred += self.learning_rate * _predict_tree(tree, x)
        return self

    def predict(self, x) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=np.float64)
        out = np.full(x.shape[0], self.init_)
        for tree in self.trees_:
            out += self.learning_rate * _predict_tree(tree, x)
        return out


def fit_weak_cate(table: ObservationalTable, n_rounds: int = 50, learning_rate: float = 0.1,
                  max_depth: int = 1) -> BoostedTrees:
    if table.n < 10:
        raise EstimationError(f"weak CATE needs at least 10 rows, got {table.n}")
    if len(np.unique(table.t)) < 2:
        raise EstimationError("weak CATE needs both treatment arms in the table")
    features = np.column_stack([table.t, table.x])
    return BoostedTrees(n_rounds, learning_rate, max_depth).fit(features, table.y)


def booster_cate(model: BoostedTrees, x) -> NDArray[np.float64]:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ones, zeros = np.ones((len(x), 1)), np.zeros((len(x), 1))
    return model.predict(np.hstack([ones, x])) - model.predict(np.hstack([zeros, x]))


def weak_cate(table: ObservationalTable, n_rounds: int = 50, learning_rate: float = 0.1,
              max_depth: int = 1) -> NDArray[np.float64]:
    """Per-row ``f(1, x) - f(0, x)`` from boosting ``y`` on ``(t, x)``."""
    model = fit_weak_cate(table, n_rounds, learning_rate, max_depth)
    return booster_cate(model, table.x)


# ---------------------------------------------------------------------------
# retrieval windowing
# ---------------------------------------------------------------------------


def _gap(c: NDArray, s, w: int, a: float, b: float):
    return np.abs(c[s] - a) + np.abs(c[s + w - 1] - b)


def select_window(c: NDArray, w: int, a: float, b: float) -> int:
    """Start of the length-``w`` window of sorted ``c`` minimizing endpoint gaps to ``[a, b]``.

    Bisection locates the two break points of the objective; left of both it
    is nonincreasing, right of both nondecreasing, so only the stretch between
    them needs a direct scan. Ties resolve to the smallest start.
    """
    n = len(c)
    last = n - w
    # p: first start with c[s] > a; r: first start with c[s+w-1] >= b
    p = min(int(np.searchsorted(c, a, side="right")), last + 1)
    r = min(max(int(np.searchsorted(c, b, side="left")) - (w - 1), 0), last + 1)
    lo, hi = min(p, r), max(p, r)
    cands = []
    if lo > 0:
        # nonincreasing on [0, lo): smallest index achieving the value at lo-1
        v = _gap(c, lo - 1, w, a, b)
        left, right = 0, lo - 1
        while left < right:
            mid = (left + right) // 2
            if _gap(c, mid, w, a, b) <= v:
                right = mid
            else:
                left = mid + 1
        cands.append(left)
    mid_range = np.arange(lo, min(hi, last) + 1)
    if len(mid_range):
        g = _gap(c, mid_range, w, a, b)
        cands.append(int(mid_range[int(np.argmin(g))]))
    if not cands:
        cands.append(last)
    vals = [_gap(c, s, w, a, b) for s in cands]
    best = min(vals)
    return min(s for s, v in zip(cands, vals) if v == best)


def retrieval_windows(tau_ctx, tau_q, max_ctx: int, batch_size: Optional[int] = None):
    """Pair query batches with context windows; returns ``[(query_idx, context_idx), ...]``.

    ``tau_ctx``/``tau_q`` are weak CATE estimates for context rows and queries.
    """
    if max_ctx < 2:
        raise ValueError("max_ctx must be at least 2")
    tau_ctx = np.asarray(tau_ctx, dtype=np.float64)
    tau_q = np.asarray(tau_q, dtype=np.float64)
    n, m = len(tau_ctx), len(tau_q)
    if n <= max_ctx:
        return [(np.arange(m), np.arange(n))]
    batch_size = batch_size or max(1, max_ctx // 8)
    c_order = np.argsort(tau_ctx, kind="stable")
    c_sorted = tau_ctx[c_order]
    q_order = np.argsort(tau_q, kind="stable")
    out = []
    for start in range(0, m, batch_size):
        qb = q_order[start:start + batch_size]
        a, b = tau_q[qb].min(), tau_q[qb].max()
        s = select_window(c_sorted, max_ctx, a, b)
        out.append((qb, c_order[s:s + max_ctx]))
    return out


def table_windows(table: ObservationalTable, query_x, max_ctx: int, max_depth: int = 2):
    """Windows for ``query_x`` against ``table``; weak CATEs come from boosted depth-``max_depth`` trees."""
    query_x = np.atleast_2d(query_x)
    if table.n <= max_ctx:
        return [(np.arange(len(query_x)), np.arange(table.n))]
    booster = fit_weak_cate(table, max_depth=max_depth)
    return retrieval_windows(booster_cate(booster, table.x), booster_cate(booster, query_x), max_ctx)


# ---------------------------------------------------------------------------
# model-backed prediction
# ---------------------------------------------------------------------------


def predict_ppds(state: ModelState, table: ObservationalTable, query_t, query_x) -> PpdBatch:
    """Histograms for arbitrary ``(t, x)`` queries, in input order."""
    query_t = np.asarray(query_t, dtype=np.int64)
    query_x = np.atleast_2d(np.asarray(query_x, dtype=np.float64))
    cfg = state.config
    m, L = len(query_t), cfg.n_bins
    edges = np.empty((m, L + 1))
    logits = np.empty((m, L))
    for q_idx, c_idx in table_windows(table, query_x, cfg.max_context):
        ctx = table.subset(c_idx)
        res = predict_batch(state.params, cfg, TokenBatch.from_table(ctx, query_t[q_idx], query_x[q_idx],
                                                                     cfg.max_features))
        edges[q_idx] = res.edges
        logits[q_idx] = res.logits
    return PpdBatch(edges, logits, cfg.theta_T)


def predict_arms(state: ModelState, table: ObservationalTable, query_x) -> tuple[PpdBatch, PpdBatch]:
    """``(q(.|x, 0), q(.|x, 1))`` for every query covariate; both arms share a window."""
    query_x = np.atleast_2d(np.asarray(query_x, dtype=np.float64))
    cfg = state.config
    m, L = len(query_x), cfg.n_bins
    edges = np.empty((2, m, L + 1))
    logits = np.empty((2, m, L))
    for q_idx, c_idx in table_windows(table, query_x, cfg.max_context):
        ctx = table.subset(c_idx)
        k = len(q_idx)
        qx = np.concatenate([query_x[q_idx], query_x[q_idx]])
        qt = np.concatenate([np.zeros(k, dtype=np.int64), np.ones(k, dtype=np.int64)])
        res = predict_batch(state.params, cfg, TokenBatch.from_table(ctx, qt, qx, cfg.max_features))
        for arm in (0, 1):
            edges[arm, q_idx] = res.edges[arm * k:(arm + 1) * k]
            logits[arm, q_idx] = res.logits[arm * k:(arm + 1) * k]
    return PpdBatch(edges[0], logits[0], cfg.theta_T), PpdBatch(edges[1], logits[1], cfg.theta_T)


def cate_from_arms(ppd0: PpdBatch, ppd1: PpdBatch, alpha: float = 0.05, n_samples: int = DEFAULT_SAMPLES,
                   seed: int = 0) -> list[EffectEstimate]:
    points = ppd_means(ppd1) - ppd_means(ppd0)
    out = []
    for start in range(0, len(ppd0), _CHUNK):
        rows = np.arange(start, min(start + _CHUNK, len(ppd0)))
        lo, hi = equal_tailed(cate_draws(ppd0, ppd1, n_samples, seed, rows), alpha)
        out.extend(EffectEstimate(float(points[r]), float(l), float(h), alpha, n_samples)
                   for r, l, h in zip(rows, lo, hi))
    return out


def estimate_cate(state: ModelState, table: ObservationalTable, query_x, alpha: float = 0.05,
                  n_samples: int = DEFAULT_SAMPLES, seed: int = 0) -> list[EffectEstimate]:
    """CATE estimates: difference of the two arms' histogram means, intervals from differenced draws."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    ppd0, ppd1 = predict_arms(state, table, query_x)
    return cate_from_arms(ppd0, ppd1, alpha, n_samples, seed)


def ate_from_arms(ppd0: PpdBatch, ppd1: PpdBatch, alpha: float = 0.05, n_samples: int = DEFAULT_SAMPLES,
                  seed: int = 0) -> EffectEstimate:
    n = len(ppd0)
    point = float(np.mean(ppd_means(ppd1) - ppd_means(ppd0)))
    total = np.zeros(n_samples)
    for start in range(0, n, _CHUNK):
        rows = np.arange(start, min(start + _CHUNK, n))
        total += cate_draws(ppd0, ppd1, n_samples, seed, rows).sum(axis=0)
    lo, hi = equal_tailed(total / n, alpha)
    return EffectEstimate(point, float(lo), float(hi), alpha, n_samples)


def estimate_ate(state: ModelState, table: ObservationalTable, alpha: float = 0.05,
                 n_samples: int = DEFAULT_SAMPLES, seed: int = 0) -> EffectEstimate:
    """ATE over the table's own units; the interval averages per-unit draws before taking quantiles."""
    ppd0, ppd1 = predict_arms(state, table, table.x)
    return ate_from_arms(ppd0, ppd1, alpha, n_samples, seed)


def estimate_all(state: ModelState, table: ObservationalTable, alpha: float = 0.05,
                 n_samples: int = DEFAULT_SAMPLES, seed: int = 0):
    """Per-unit CATEs and the ATE from a single pass over the table."""
    ppd0, ppd1 = predict_arms(state, table, table.x)
    return cate_from_arms(ppd0, ppd1, alpha, n_samples, seed), ate_from_arms(ppd0, ppd1, alpha, n_samples, seed)
