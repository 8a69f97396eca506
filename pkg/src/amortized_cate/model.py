"""
PFN-style in-context transformer emitting quantized CEPO posterior-predictives.

Each context row ``(t, x, y)`` and query row ``(t, x)`` becomes one token
(sum of a treatment embedding and linear covariate/outcome embeddings, no
positional encodings). Every token attends to the context tokens only, so a
query's histogram depends on the context set and on that query alone.

Covariates and outcomes are standardized with context statistics before
embedding; the histogram lives on ``[-10, 10]`` in standardized units, which
is the same as ``[m - 10 s, m + 10 s]`` in outcome units.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from numpy.typing import NDArray

from .numerics import DTYPE, ParamStore, as_tensor, masked_attention, rms_norm, softmax_t, swiglu
from .prior import ObservationalTable

SD_FLOOR = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    n_bins: int = 64
    max_features: int = 24
    base_support: tuple[float, float] = (-10.0, 10.0)
    theta_T: float = 1.0
    ffn_hidden: int = 128
    max_context: int = 512

    def __post_init__(self):
        object.__setattr__(self, "base_support", tuple(float(v) for v in self.base_support))
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_bins < 2:
            raise ValueError("n_bins must be at least 2")
        if self.max_features < 1:
            raise ValueError("max_features must be at least 1")
        if not self.base_support[0] < self.base_support[1]:
            raise ValueError("base_support must satisfy lo < hi")
        if not self.theta_T > 0:
            raise ValueError("theta_T must be positive")
        if self.n_layers < 1 or self.ffn_hidden < 1 or self.max_context < 2:
            raise ValueError("n_layers, ffn_hidden must be >= 1 and max_context >= 2")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["base_support"] = list(self.base_support)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TokenBatch:
    """Context rows ``(t, x, y)`` and query rows ``(t, x)`` with ``x`` zero-padded to ``F``."""

    context_t: NDArray[np.int64]
    context_x: NDArray[np.float64]
    context_y: NDArray[np.float64]
    query_t: NDArray[np.int64]
    query_x: NDArray[np.float64]

    @classmethod
    def build(cls, context_t, context_x, context_y, query_t, query_x, max_features: int) -> "TokenBatch":
        context_x = np.atleast_2d(np.asarray(context_x, dtype=np.float64))
        query_x = np.atleast_2d(np.asarray(query_x, dtype=np.float64))
        d = context_x.shape[1]
        if d > max_features or query_x.shape[1] != d:
            raise ValueError(f"covariate width {d} must match between context and queries and be <= {max_features}")
        if context_x.shape[0] < 1:
            raise ValueError("context must contain at least one row")
        pad = max_features - d
        return cls(
            np.asarray(context_t, dtype=np.int64),
            np.pad(context_x, ((0, 0), (0, pad))),
            np.asarray(context_y, dtype=np.float64),
            np.asarray(query_t, dtype=np.int64),
            np.pad(query_x, ((0, 0), (0, pad))),
        )

    @classmethod
    def from_table(cls, table: ObservationalTable, query_t, query_x, max_features: int) -> "TokenBatch":
        return cls.build(table.t, table.x, table.y, query_t, query_x, max_features)

    @property
    def n_ctx(self) -> int:
        return len(self.context_t)

    @property
    def n_q(self) -> int:
        return len(self.query_t)


@dataclass(frozen=True)
class QuantizedPpd:
    """An ``L``-bin histogram approximating a CEPO posterior-predictive."""

    edges: NDArray[np.float64]
    probs: NDArray[np.float64]

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        probs = np.asarray(self.probs, dtype=np.float64)
        if edges.ndim != 1 or probs.ndim != 1 or len(edges) != len(probs) + 1:
            raise ValueError("need L+1 edges for L probabilities")
        if not np.all(np.diff(edges) > 0):
            raise ValueError("edges must be strictly increasing")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "probs", probs)

    @property
    def support(self) -> tuple[float, float]:
        return float(self.edges[0]), float(self.edges[-1])

    @property
    def centers(self) -> NDArray[np.float64]:
        return 0.5 * (self.edges[:-1] + self.edges[1:])


@dataclass
class PpdBatch:
    """Many histograms at once: per-row ``edges`` (M, L+1) and ``logits`` (M, L)."""

    edges: NDArray[np.float64]
    logits: NDArray[np.float64]
    theta_T: float = 1.0

    def __len__(self) -> int:
        return self.logits.shape[0]

    @property
    def probs(self) -> NDArray[np.float64]:
        return softmax_t(self.logits, self.theta_T).numpy()

    @property
    def centers(self) -> NDArray[np.float64]:
        return 0.5 * (self.edges[:, :-1] + self.edges[:, 1:])

    def with_temperature(self, theta_T: float) -> "PpdBatch":
        return PpdBatch(self.edges, self.logits, theta_T)

    def subset(self, idx) -> "PpdBatch":
        return PpdBatch(self.edges[idx], self.logits[idx], self.theta_T)

    def __getitem__(self, i: int) -> QuantizedPpd:
        return QuantizedPpd(self.edges[i], self.probs[i])

    def to_list(self) -> list[QuantizedPpd]:
        probs = self.probs
        return [QuantizedPpd(self.edges[i], probs[i]) for i in range(len(self))]

    @staticmethod
    def concat(batches: list["PpdBatch"]) -> "PpdBatch":
        return PpdBatch(np.concatenate([b.edges for b in batches]),
                        np.concatenate([b.logits for b in batches]), batches[0].theta_T)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Scaled-Gaussian projections (variance ``1/d_model``), zero biases, unit gains."""
    gen = torch.Generator().manual_seed(int(seed) % (2**63))
    D, F, L, Hf = cfg.d_model, cfg.max_features, cfg.n_bins, cfg.ffn_hidden
    dh = D // cfg.n_heads
    std = 1.0 / math.sqrt(D)

    def gauss(*shape):
        return torch.randn(*shape, generator=gen, dtype=DTYPE) * std

    p = ParamStore()
    p["emb.t"] = gauss(2, D)
    p["emb.x.w"] = gauss(F, D)
    p["emb.x.b"] = torch.zeros(D, dtype=DTYPE)
    p["emb.y.w"] = gauss(1, D)
    p["emb.y.b"] = torch.zeros(D, dtype=DTYPE)
    for i in range(cfg.n_layers):
        p[f"l{i}.norm"] = torch.ones(D, dtype=DTYPE)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"l{i}.{name}"] = gauss(D, D)
        p[f"l{i}.q_gain"] = torch.ones(dh, dtype=DTYPE)
        p[f"l{i}.k_gain"] = torch.ones(dh, dtype=DTYPE)
        p[f"l{i}.ff_gate"] = gauss(D, Hf)
        p[f"l{i}.ff_up"] = gauss(D, Hf)
        p[f"l{i}.ff_down"] = gauss(Hf, D)
    p["out.norm"] = torch.ones(D, dtype=DTYPE)
    p["out.w"] = gauss(D, L)
    p["out.b"] = torch.zeros(L, dtype=DTYPE)
    return p


@dataclass
class ModelState:
    params: ParamStore
    config: ModelConfig

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelState":
        return cls(init_params(config, seed), config)

    @property
    def theta_T(self) -> float:
        return self.config.theta_T

    def with_temperature(self, theta_T: float) -> "ModelState":
        return ModelState(self.params, dataclasses.replace(self.config, theta_T=float(theta_T)))

    def with_max_context(self, max_context: int) -> "ModelState":
        return ModelState(self.params, dataclasses.replace(self.config, max_context=int(max_context)))

    def copy(self) -> "ModelState":
        return ModelState(self.params.copy(), self.config)

    def save(self, path) -> tuple[Path, Path]:
        """Write the parameter checkpoint and its ``.config.json`` sidecar."""
        path = Path(path)
        self.params.save(path)
        sidecar = sidecar_path(path)
        sidecar.write_text(json.dumps({"model": self.config.to_dict(), "theta_T": self.config.theta_T},
                                      indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path, sidecar

    @classmethod
    def load(cls, path) -> "ModelState":
        path = Path(path)
        doc = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
        cfg = ModelConfig.from_dict(doc["model"])
        cfg = dataclasses.replace(cfg, theta_T=float(doc.get("theta_T", cfg.theta_T)))
        return cls(ParamStore.load(path), cfg)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".config.json")


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def bin_support(context_y, cfg: ModelConfig):
    """Scale the base support by the context outcome mean/sd; returns ``(lo, hi, edges)``."""
    y = np.asarray(context_y, dtype=np.float64)
    if y.size < 1:
        raise ValueError("bin_support needs at least one context outcome")
    m = float(y.mean())
    s = max(float(y.std()), SD_FLOOR)
    lo = m + cfg.base_support[0] * s
    hi = m + cfg.base_support[1] * s
    return lo, hi, m + s * np.linspace(cfg.base_support[0], cfg.base_support[1], cfg.n_bins + 1)


def standardize(batch: TokenBatch) -> tuple[TokenBatch, float, float]:
    """Z-score covariates and outcomes with context statistics (padding stays zero)."""
    mx = batch.context_x.mean(axis=0)
    sx = np.maximum(batch.context_x.std(axis=0), SD_FLOOR)
    m = float(batch.context_y.mean())
    s = max(float(batch.context_y.std()), SD_FLOOR)
    out = TokenBatch(
        batch.context_t,
        (batch.context_x - mx) / sx,
        (batch.context_y - m) / s,
        batch.query_t,
        (batch.query_x - mx) / sx,
    )
    return out, m, s


def embed_rows(batch: TokenBatch, params: ParamStore) -> tuple[torch.Tensor, torch.Tensor]:
    """Token tensors ``(context (N, D), queries (M, D))`` for an unbatched input."""
    ctx, qry = _embed(params,
                      torch.as_tensor(batch.context_t)[None], as_tensor(batch.context_x)[None],
                      as_tensor(batch.context_y)[None],
                      torch.as_tensor(batch.query_t)[None], as_tensor(batch.query_x)[None])
    return ctx[0], qry[0]


def _embed(params, ctx_t, ctx_x, ctx_y, q_t, q_x):
    e_t = params["emb.t"]
    wx, bx = params["emb.x.w"], params["emb.x.b"]
    ctx = e_t[ctx_t] + ctx_x @ wx + bx + ctx_y[..., None] * params["emb.y.w"][0] + params["emb.y.b"]
    qry = e_t[q_t] + q_x @ wx + bx
    return ctx, qry


def batch_logits(params: ParamStore, cfg: ModelConfig, ctx_t, ctx_x, ctx_y, q_t, q_x) -> torch.Tensor:
    """Logits ``(B, M, L)`` for ``B`` independent (context, queries) problems.

    Inputs are already standardized; ``ctx_*`` have ``N`` rows, ``q_*`` have ``M``.
    """
    ctx, qry = _embed(params, ctx_t, ctx_x, ctx_y, q_t, q_x)
    B, N, D = ctx.shape
    M = qry.shape[1]
    H = cfg.n_heads
    dh = D // H
    h = torch.cat([ctx, qry], dim=1)
    for i in range(cfg.n_layers):
        z = rms_norm(h, params[f"l{i}.norm"])
        q = (z @ params[f"l{i}.wq"]).view(B, N + M, H, dh).transpose(1, 2)
        zc = z[:, :N]
        k = (zc @ params[f"l{i}.wk"]).view(B, N, H, dh).transpose(1, 2)
        v = (zc @ params[f"l{i}.wv"]).view(B, N, H, dh).transpose(1, 2)
        # keys/values come from context rows only: the asymmetric PFN mask
        a = masked_attention(q, k, v, q_gain=params[f"l{i}.q_gain"], k_gain=params[f"l{i}.k_gain"])
        a = a.transpose(1, 2).reshape(B, N + M, D) @ params[f"l{i}.wo"]
        f = swiglu(z, params[f"l{i}.ff_gate"], params[f"l{i}.ff_up"], params[f"l{i}.ff_down"])
        h = h + a + f
    out = rms_norm(h[:, N:], params["out.norm"])
    return out @ params["out.w"] + params["out.b"]


def context_mask(n_ctx: int, n_q: int) -> torch.Tensor:
    """Boolean (N+M, N+M) mask equivalent to the context-only keys used in :func:`batch_logits`."""
    mask = torch.zeros(n_ctx + n_q, n_ctx + n_q, dtype=torch.bool)
    mask[:, :n_ctx] = True
    return mask


def predict_batch(params: ParamStore, cfg: ModelConfig, batch: TokenBatch, chunk: int = 1024) -> PpdBatch:
    """Histogram logits for every query of ``batch`` (no gradient)."""
    if batch.n_ctx < 1:
        raise ValueError("context must contain at least one row")
    norm, _, _ = standardize(batch)
    _, _, edges = bin_support(batch.context_y, cfg)
    ct = torch.as_tensor(norm.context_t)[None]
    cx = as_tensor(norm.context_x)[None]
    cy = as_tensor(norm.context_y)[None]
    pieces = []
    with torch.no_grad():
        for start in range(0, max(batch.n_q, 1), chunk):
            sl = slice(start, start + chunk)
            qt = torch.as_tensor(norm.query_t[sl])[None]
            qx = as_tensor(norm.query_x[sl])[None]
            pieces.append(batch_logits(params, cfg, ct, cx, cy, qt, qx)[0].numpy())
    logits = np.concatenate(pieces) if pieces else np.zeros((0, cfg.n_bins))
    return PpdBatch(np.tile(edges, (len(logits), 1)), logits, cfg.theta_T)


def forward(batch: TokenBatch, params: ParamStore, cfg: ModelConfig) -> list[QuantizedPpd]:
    """One quantized CEPO posterior-predictive per query."""
    return predict_batch(params, cfg, batch).to_list()
