"""
Scaled-down end-to-end experiments on the sinusoidal family.

A small model is trained on the Linear sub-family (omega = 0) in two
constant-rate phases, cached on disk under a hash of its configuration, and
then evaluated on held-out DGPs: estimation error at two context sizes, and
regression/CATE coverage before and after temperature tuning, in and out of
distribution.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .calibration import DEFAULT_LEVELS, DEFAULT_TEMPERATURES, CoverageCurve, cate_coverage_from_arms, \
    search_temperature
from .evaluation import ate_rel_error, pehe
from .inference import ppd_means, predict_arms
from .model import ModelConfig, ModelState
from .prior import SinusoidalPrior
from .training import TrainConfig, TrainState, train, write_trace

log = logging.getLogger(__name__)

LINEAR = (0.0, 0.0)
L2_TEST = (1.5, 2.0)
HELDOUT_SEED = 10_000


@dataclass(frozen=True)
class ToyConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(n_bins=256, max_context=1024))
    phases: tuple = ((3000, 1e-3, 200), (6000, 3e-4, 0))  # (end step, lr, warmup)
    B_t: int = 8
    B_q: int = 32
    min_context: int = 16
    max_context: int = 256
    seed: int = 0
    omega_range: tuple = LINEAR

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        d["phases"] = [list(p) for p in self.phases]
        d["omega_range"] = list(self.omega_range)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def total_steps(self) -> int:
        return self.phases[-1][0]

    def phase_configs(self) -> list[TrainConfig]:
        return [TrainConfig(B_t=self.B_t, B_q=self.B_q, steps=end, lr=lr, warmup=warm, seed=self.seed,
                            min_context=self.min_context, max_context=self.max_context)
                for end, lr, warm in self.phases]


def train_toy(cfg: ToyConfig = ToyConfig(), cache_dir=None, workers: int = 1) -> tuple[ModelState, list]:
    """Train (or load from ``cache_dir``) the toy model; returns ``(model, trace)``."""
    path = trace_path = None
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        path = cache_dir / f"toy-{cfg.digest()}.ckpt"
        trace_path = cache_dir / f"toy-{cfg.digest()}.trace.csv"
        if path.exists() and trace_path.exists():
            return ModelState.load(path), _read_trace(trace_path)
    state = TrainState.fresh(ModelState.init(cfg.model, cfg.seed))
    prior = SinusoidalPrior(cfg.omega_range)
    trace: list = []
    t0 = time.time()
    for tcfg in cfg.phase_configs():
        state, part = train(state, tcfg, prior, workers=workers, log_every=500)
        trace += part
    seconds = time.time() - t0
    log.info("trained %d steps in %.0f s", cfg.total_steps, seconds)
    if path is not None:
        state.model.save(path)
        write_trace(trace, trace_path)
        _meta_path(cache_dir, cfg).write_text(json.dumps({"train_seconds": seconds}))
    return state.model, trace


def _meta_path(cache_dir, cfg: ToyConfig) -> Path:
    return Path(cache_dir) / f"toy-{cfg.digest()}.meta.json"


def toy_train_seconds(cfg: ToyConfig = ToyConfig(), cache_dir=None):
    """Wall time of the run that produced the cached toy model, or None when unknown."""
    if cache_dir is None or not _meta_path(cache_dir, cfg).exists():
        return None
    return float(json.loads(_meta_path(cache_dir, cfg).read_text())["train_seconds"])


def _read_trace(path) -> list:
    rows = np.genfromtxt(path, delimiter=",", names=True)
    return [{"step": int(r["step"]), "loss": float(r["loss"]), "lr": float(r["lr"]),
             "context_len": int(r["context_len"])} for r in np.atleast_1d(rows)]


# ---------------------------------------------------------------------------
# estimation quality
# ---------------------------------------------------------------------------


def heldout_dgps(n_dgps: int = 20, n_rows: int = 1024, omega_range=LINEAR, base_seed: int = HELDOUT_SEED):
    prior = SinusoidalPrior(omega_range)
    return [prior(base_seed + i, n_rows) for i in range(n_dgps)]


def estimation_quality(state: ModelState, instances, sizes=(64, 1024)) -> dict:
    """In-sample PEHE and relative ATE error per DGP at each context size (prefix subsets)."""
    out = {n: {"pehe": [], "ate_rel_error": []} for n in sizes}
    for inst in instances:
        for n in sizes:
            sub = inst.subset(np.arange(n))
            table = sub.observational()
            ppd0, ppd1 = predict_arms(state, table, table.x)
            tau_hat = ppd_means(ppd1) - ppd_means(ppd0)
            out[n]["pehe"].append(pehe(tau_hat, sub.tau))
            out[n]["ate_rel_error"].append(ate_rel_error(float(tau_hat.mean()), float(sub.tau.mean())))
    return {n: {k: np.array(v) for k, v in d.items()} for n, d in out.items()}


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


@dataclass
class CalibrationRun:
    theta_T: list
    ice_mu_before: list
    ice_mu_after: list
    cate_before: list  # CoverageCurve per DGP
    cate_after: list

    @staticmethod
    def _mean_curve(curves) -> CoverageCurve:
        return CoverageCurve(DEFAULT_LEVELS, np.mean([c.coverage for c in curves], axis=0), "cate")

    @property
    def mean_cate_before(self) -> CoverageCurve:
        return self._mean_curve(self.cate_before)

    @property
    def mean_cate_after(self) -> CoverageCurve:
        return self._mean_curve(self.cate_after)


def calibration_run(state: ModelState, instances, grid=DEFAULT_TEMPERATURES, k_folds: int = 5,
                    seed: int = 0) -> CalibrationRun:
    """Tune the temperature per DGP on its own table and record CATE coverage before/after."""
    run = CalibrationRun([], [], [], [], [])
    for inst in instances:
        table = inst.observational()
        res = search_temperature(state, table, grid, k_folds, seed=seed)
        ppd0, ppd1 = predict_arms(state, table, table.x)
        run.theta_T.append(res.theta_T)
        run.ice_mu_before.append(res.ice_before)
        run.ice_mu_after.append(res.ice_after)
        run.cate_before.append(cate_coverage_from_arms(ppd0, ppd1, inst.tau, seed=seed))
        run.cate_after.append(cate_coverage_from_arms(ppd0, ppd1, inst.tau, seed=seed, theta_T=res.theta_T))
    return run


def pre_calibration_cate_ice(state: ModelState, instances, seed: int = 0) -> np.ndarray:
    out = []
    for inst in instances:
        table = inst.observational()
        ppd0, ppd1 = predict_arms(state, table, table.x)
        out.append(cate_coverage_from_arms(ppd0, ppd1, inst.tau, seed=seed).ice)
    return np.array(out)
