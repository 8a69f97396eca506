"""
Float64 tensor primitives for the in-context transformer.

Reverse-mode differentiation is delegated to ``torch.autograd``; this module
adds the primitives the model needs (temperature softmax, RMS normalization,
masked attention with QK-normalization, gated feed-forward), a named
parameter store with a versioned JSON checkpoint, and a central
finite-difference gradient checker that is independent of autograd.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
import torch

DTYPE = torch.float64
CHECKPOINT_VERSION = 1
QK_NORM_EPS = 1e-6


class NumericError(FloatingPointError):
    """A non-finite value appeared; ``op`` names the primitive that produced it."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        super().__init__(f"non-finite value produced by '{op}'" + (f": {detail}" if detail else ""))


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def check_finite(x: torch.Tensor, op: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(op)
    return x


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def softmax_t(logits, temperature: float = 1.0, dim: int = -1) -> torch.Tensor:
    """Softmax of ``logits / temperature`` (max-subtracted)."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = as_tensor(logits) / temperature
    z = z - z.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(z)
    return check_finite(e / e.sum(dim=dim, keepdim=True), "softmax_t")


def log_softmax_t(logits, temperature: float = 1.0, dim: int = -1) -> torch.Tensor:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = as_tensor(logits) / temperature
    return check_finite(z - torch.logsumexp(z, dim=dim, keepdim=True), "log_softmax_t")


def rms_norm(x: torch.Tensor, weight: Optional[torch.Tensor] = None, eps: float = QK_NORM_EPS) -> torch.Tensor:
    out = x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
    if weight is not None:
        out = out * weight
    return check_finite(out, "rms_norm")


def masked_attention(q, k, v, mask=None, q_gain=None, k_gain=None, eps: float = QK_NORM_EPS,
                     return_weights: bool = False):
    """Scaled dot-product attention with RMS-normalized queries and keys.

    ``q``: (..., Nq, dh); ``k``, ``v``: (..., Nk, dh). ``mask`` is boolean,
    broadcastable to (..., Nq, Nk), True where the key may be attended.
    Masked keys get exactly zero weight.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    qn = rms_norm(q, q_gain, eps)
    kn = rms_norm(k, k_gain, eps)
    scores = qn @ kn.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if not mask.any(dim=-1).all():
            raise ValueError("every query row needs at least one attendable key")
        scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    out = check_finite(weights @ v, "masked_attention")
    return (out, weights) if return_weights else out


def swiglu(x: torch.Tensor, w_gate: torch.Tensor, w_up: torch.Tensor, w_down: torch.Tensor) -> torch.Tensor:
    """Gated-linear feed-forward ``(silu(x W_g) * x W_u) W_d``."""
    return check_finite((torch.nn.functional.silu(x @ w_gate) * (x @ w_up)) @ w_down, "swiglu")


def gather_log(probs: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    return check_finite(torch.log(probs.gather(-1, index)), "log")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class ParamStore:
    """Ordered mapping ``name -> float64 tensor`` with gradient accumulators."""

    def __init__(self, params: Optional[dict] = None):
        self._params: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        for name, value in (params or {}).items():
            self[name] = value

    def __setitem__(self, name: str, value) -> None:
        t = as_tensor(value).detach().clone().requires_grad_(True)
        self._params[name] = t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def n_params(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def grad(self, name: str) -> torch.Tensor:
        g = self._params[name].grad
        return torch.zeros_like(self._params[name]) if g is None else g

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.detach().clone() for k, v in self._params.items()})

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self._params.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([v.detach().numpy().ravel() for v in self._params.values()])

    def equals(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            torch.equal(self[k].detach(), other[k].detach()) for k in self.names()
        )

    # checkpoint -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "params": {
                k: {"shape": list(v.shape), "values": v.detach().numpy().ravel().tolist()}
                for k, v in self._params.items()
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ParamStore":
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        store = cls()
        for name, entry in doc["params"].items():
            values = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
            store[name] = values
        return store

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def forward_backward(loss_fn: Callable[[ParamStore], torch.Tensor], store: ParamStore) -> float:
    """Evaluate ``loss_fn(store)`` and fill every parameter's gradient."""
    store.zero_grad()
    loss = loss_fn(store)
    if not torch.isfinite(loss):
        raise NumericError("loss", f"value {loss.item()!r}")
    loss.backward()
    for name, p in store.items():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericError("backward", f"gradient of '{name}'")
    return float(loss.detach())


def finite_difference_check(
    loss_fn: Callable[[ParamStore], torch.Tensor],
    store: ParamStore,
    n_probes: int = 100,
    h: float = 1e-5,
    seed: int = 0,
    names: Optional[Iterable[str]] = None,
    floor: float = 1e-8,
) -> dict:
    """Compare autograd gradients with central differences at random coordinates.

    The relative error of a probe is ``|a - n| / max(|a|, |n|, floor)``.
    Returns the max relative error and per-probe records.
    """
    forward_backward(loss_fn, store)
    names = list(names) if names is not None else store.names()
    analytic = {k: store.grad(k).detach().clone() for k in names}
    rng = np.random.default_rng(seed)
    sizes = np.array([store[k].numel() for k in names], dtype=float)
    records = []
    with torch.no_grad():
        for _ in range(n_probes):
            name = names[rng.choice(len(names), p=sizes / sizes.sum())]
            flat = store[name].view(-1)
            i = int(rng.integers(flat.numel()))
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(loss_fn(store))
            flat[i] = orig - h
            down = float(loss_fn(store))
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = float(analytic[name].view(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            records.append({"name": name, "index": i, "analytic": a, "numeric": numeric, "rel_err": rel})
    return {"max_rel_err": max(r["rel_err"] for r in records), "probes": records}
