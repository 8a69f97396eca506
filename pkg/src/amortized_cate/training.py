"""
Histogram-loss training of the in-context model on simulated DGPs.

Each step samples ``B_t`` DGPs, one context length shared by the step, and
``B_q`` fresh query rows per DGP with random treatments. Targets are the
ground-truth CEPOs smoothed by a narrow Gaussian and integrated over bins.
All randomness is keyed by ``(seed, step, dgp_index)`` so runs can be resumed
from a checkpoint bit-for-bit and DGP simulation can be farmed out to workers.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from concurrent.futures import Executor, ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from scipy.special import ndtr

from .model import ModelConfig, ModelState, batch_logits
from .numerics import NumericError, ParamStore, forward_backward, log_softmax_t
from .prior import DgpInstance, _rng, derive_seed

log = logging.getLogger(__name__)

Prior = Callable[[int, int], DgpInstance]


@dataclass(frozen=True)
class TrainConfig:
    B_t: int = 8
    B_q: int = 32
    steps: int = 2000
    lr: float = 3e-4
    warmup: int = 200
    sigma_smooth: float = 0.5
    seed: int = 0
    min_context: int = 16
    max_context: int = 256
    checkpoint_every: int = 0
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.B_t < 1 or self.B_q < 1:
            raise ValueError("B_t and B_q must be >= 1")
        if not self.sigma_smooth > 0:
            raise ValueError("sigma_smooth must be positive")
        if self.steps < 0 or self.warmup < 0:
            raise ValueError("steps and warmup must be >= 0")
        if not 1 <= self.min_context <= self.max_context:
            raise ValueError("need 1 <= min_context <= max_context")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    def lr_at(self, step: int) -> float:
        if self.warmup == 0:
            return self.lr
        return self.lr * min(1.0, (step + 1) / self.warmup)


# ---------------------------------------------------------------------------
# targets and loss
# ---------------------------------------------------------------------------


def gaussian_bin_targets(mu, sigma, edges) -> np.ndarray:
    """Bin masses of ``N(mu, sigma^2)``; tails are folded into the boundary bins.

    Broadcasts: ``mu``/``sigma`` of shape (K,) with ``edges`` (K, L+1), or scalars
    with a single edge vector.
    """
    edges = np.asarray(edges, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    z = (edges - mu[..., None]) / sigma[..., None]
    cdf = ndtr(z)
    n = np.diff(cdf, axis=-1)
    n[..., 0] += cdf[..., 0]
    n[..., -1] += 1.0 - cdf[..., -1]
    n = np.maximum(n, 0.0)
    return n / n.sum(axis=-1, keepdims=True)


def histogram_loss(target, q) -> float:
    """Cross-entropy ``-sum_l N[l] log q[l]``."""
    target = np.asarray(target, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if target.shape != q.shape:
        raise ValueError("target and prediction must have the same length")
    support = target > 0
    if np.any(q[support] <= 0):
        raise NumericError("histogram_loss", "zero predicted mass where the target has mass")
    return float(-(target[support] * np.log(q[support])).sum())


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, params: ParamStore) -> "AdamState":
        return cls(0, {k: torch.zeros_like(p.detach()) for k, p in params.items()},
                   {k: torch.zeros_like(p.detach()) for k, p in params.items()})

    def copy(self) -> "AdamState":
        return AdamState(self.step, {k: v.clone() for k, v in self.m.items()},
                         {k: v.clone() for k, v in self.v.items()})


def adam_update(params: ParamStore, opt: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    opt.step += 1
    bc1 = 1 - beta1**opt.step
    bc2 = 1 - beta2**opt.step
    with torch.no_grad():
        for name, p in params.items():
            g = params.grad(name)
            opt.m[name].mul_(beta1).add_(g, alpha=1 - beta1)
            opt.v[name].mul_(beta2).addcmul_(g, g, value=1 - beta2)
            denom = (opt.v[name] / bc2).sqrt_().add_(eps)
            p.addcdiv_(opt.m[name], denom, value=-lr / bc1)


@dataclass
class TrainState:
    model: ModelState
    opt: AdamState
    step: int = 0

    @classmethod
    def fresh(cls, model: ModelState) -> "TrainState":
        return cls(model, AdamState.zeros(model.params), 0)

    def copy(self) -> "TrainState":
        return TrainState(self.model.copy(), self.opt.copy(), self.step)

    def save(self, path) -> None:
        doc = {
            "version": 1,
            "step": self.step,
            "model_config": self.model.config.to_dict(),
            "params": self.model.params.to_dict(),
            "adam": {
                "step": self.opt.step,
                "m": ParamStore(self.opt.m).to_dict(),
                "v": ParamStore(self.opt.v).to_dict(),
            },
        }
        Path(path).write_text(json.dumps(doc), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrainState":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        model = ModelState(ParamStore.from_dict(doc["params"]), ModelConfig.from_dict(doc["model_config"]))
        m = {k: v.detach() for k, v in ParamStore.from_dict(doc["adam"]["m"]).items()}
        v = {k: t.detach() for k, t in ParamStore.from_dict(doc["adam"]["v"]).items()}
        return cls(model, AdamState(doc["adam"]["step"], m, v), doc["step"])


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class StepBatch:
    ctx_t: torch.Tensor
    ctx_x: torch.Tensor
    ctx_y: torch.Tensor
    q_t: torch.Tensor
    q_x: torch.Tensor
    targets: torch.Tensor
    n_ctx: int


def _simulate_one(args):
    prior, seed, n_rows = args
    return prior(seed, n_rows)


def _prepare_dgp(inst: DgpInstance, n_ctx: int, q_t: np.ndarray, mcfg: ModelConfig, sigma_bins: float):
    F, L = mcfg.max_features, mcfg.n_bins
    d = inst.x.shape[1]
    if d > F:
        raise ValueError(f"DGP has {d} covariates but the model accepts at most {F}")
    cx, cy, ct = inst.x[:n_ctx], inst.y[:n_ctx], inst.t[:n_ctx]
    qx = inst.x[n_ctx:]
    mu = np.where(q_t == 1, inst.mu1[n_ctx:], inst.mu0[n_ctx:])
    mx = cx.mean(axis=0)
    sx = np.maximum(cx.std(axis=0), 1e-8)
    m = cy.mean()
    s = max(cy.std(), 1e-8)
    lo, hi = mcfg.base_support
    edges = np.linspace(lo, hi, L + 1)
    sigma = sigma_bins * (hi - lo) / L
    # out-of-support CEPOs end up in the boundary bins via the tail folding
    targets = gaussian_bin_targets((mu - m) / s, np.full(len(mu), sigma), np.tile(edges, (len(mu), 1)))
    pad = ((0, 0), (0, F - d))
    return (ct, np.pad((cx - mx) / sx, pad), (cy - m) / s, q_t, np.pad((qx - mx) / sx, pad), targets)


def sample_step_batch(prior: Prior, cfg: TrainConfig, mcfg: ModelConfig, step: int,
                      executor: Optional[Executor] = None) -> StepBatch:
    """Simulate the ``B_t`` DGPs of one training step (ordered by dgp index)."""
    rng = _rng(cfg.seed, step, 0)
    n_ctx = int(rng.integers(cfg.min_context, cfg.max_context + 1))
    seeds = [derive_seed(cfg.seed, step, 1, i) for i in range(cfg.B_t)]
    jobs = [(prior, s, n_ctx + cfg.B_q) for s in seeds]
    if executor is not None:
        instances = list(executor.map(_simulate_one, jobs))
    else:
        instances = [_simulate_one(j) for j in jobs]
    parts = []
    for i, inst in enumerate(instances):
        q_t = _rng(cfg.seed, step, 2, i).integers(0, 2, cfg.B_q)
        parts.append(_prepare_dgp(inst, n_ctx, q_t, mcfg, cfg.sigma_smooth))
    stack = [np.stack([p[j] for p in parts]) for j in range(6)]
    return StepBatch(
        torch.as_tensor(stack[0]), torch.as_tensor(stack[1]), torch.as_tensor(stack[2]),
        torch.as_tensor(stack[3]), torch.as_tensor(stack[4]), torch.as_tensor(stack[5]), n_ctx,
    )


def batch_loss(params: ParamStore, mcfg: ModelConfig, batch: StepBatch) -> torch.Tensor:
    logits = batch_logits(params, mcfg, batch.ctx_t, batch.ctx_x, batch.ctx_y, batch.q_t, batch.q_x)
    per_query = -(batch.targets * log_softmax_t(logits, 1.0)).sum(dim=-1)
    return per_query.mean()


def train_step(state: TrainState, prior: Optional[Prior], cfg: TrainConfig, step_index: int,
               batch: Optional[StepBatch] = None, executor: Optional[Executor] = None):
    """One Adam update on a freshly simulated (or supplied) batch; returns ``(new_state, loss, batch)``."""
    if batch is None:
        batch = sample_step_batch(prior, cfg, state.model.config, step_index, executor)
    new = state.copy()
    params = new.model.params
    loss = forward_backward(lambda p: batch_loss(p, new.model.config, batch), params)
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_([p for _, p in params.items()], cfg.grad_clip)
    adam_update(params, new.opt, cfg.lr_at(step_index))
    params.zero_grad()
    new.step = step_index + 1
    return new, loss, batch


def train(state: TrainState, cfg: TrainConfig, prior: Prior, workers: int = 1,
          checkpoint_path=None, trace_path=None, log_every: int = 0):
    """Run steps ``state.step .. cfg.steps - 1``; returns ``(state, trace)``.

    ``trace`` rows are ``{"step", "loss", "lr", "context_len"}``. When
    ``checkpoint_path`` is set and ``cfg.checkpoint_every > 0`` the full
    training state is written every ``checkpoint_every`` steps.
    """
    trace = []
    executor = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for step in range(state.step, cfg.steps):
            state, loss, batch = train_step(state, prior, cfg, step, executor=executor)
            trace.append({"step": step, "loss": loss, "lr": cfg.lr_at(step), "context_len": batch.n_ctx})
            if log_every and (step + 1) % log_every == 0:
                recent = np.mean([r["loss"] for r in trace[-log_every:]])
                log.info("step %d  loss %.4f", step + 1, recent)
            if checkpoint_path is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                state.save(checkpoint_path)
    finally:
        if executor is not None:
            executor.shutdown()
    if trace_path is not None:
        write_trace(trace, trace_path)
    return state, trace


def write_trace(trace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "lr", "context_len"])
        for r in trace:
            writer.writerow([r["step"], repr(float(r["loss"])), repr(float(r["lr"])), r["context_len"]])


def smoothed(values, window: int = 100) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return values.copy()
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")
