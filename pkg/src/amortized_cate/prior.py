"""
Causal data-generating processes (DGPs) for training and testing.

Every DGP here satisfies strong ignorability by construction: treatment
propensities are functions of the covariates only, and the factual outcome is
the potential outcome of the assigned arm. The ground-truth conditional
expected potential outcomes (CEPOs) ``mu0``/``mu1`` travel with each sample.

Randomness is derived from ``(seed, stream)`` pairs through
``numpy.random.SeedSequence`` so that parallel and serial generation agree and
each component (covariates, noise, assignment, ...) has its own stream.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

__all__ = [
    "BaseTable",
    "CausalPrior",
    "DgpConfig",
    "DgpInstance",
    "Mechanism",
    "NoiseKind",
    "ObservationalTable",
    "PolynomialPrior",
    "SinusoidalPrior",
    "augment_heterogeneity",
    "derive_seed",
    "exacerbate_positivity",
    "make_polynomial_dgp",
    "make_sinusoidal_dgp",
    "polynomial_features",
    "prior_from_spec",
    "read_observational_csv",
    "sample_dgp",
    "sample_outcomes",
    "sample_propensity_logits",
    "synth_base_table",
    "write_dgp_csv",
]

_SEED_MOD = 2**64
CATEGORICAL_PROB = 0.25
MAX_LEVELS = 8


class Mechanism(str, enum.Enum):
    RCT = "RCT"
    LINEAR = "Linear"
    NONLINEAR = "Nonlinear"


class NoiseKind(str, enum.Enum):
    GAUSSIAN = "Gaussian"
    LAPLACE = "Laplace"
    UNIFORM = "Uniform"
    NONE = "None"


def derive_seed(seed: int, *keys: int) -> int:
    """Counter-based split of ``seed`` into an independent 64-bit child seed."""
    ss = np.random.SeedSequence([int(seed) % _SEED_MOD, *(int(k) % _SEED_MOD for k in keys)])
    return int(ss.generate_state(1, np.uint64)[0])


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) % _SEED_MOD, *(int(k) % _SEED_MOD for k in keys)]))


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BaseTable:
    """Raw synthetic table; columns are stored as an ``(n_rows, n_cols)`` array."""

    data: NDArray[np.float64]
    column_kinds: tuple[str, ...]

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] < 2:
            raise ValueError("base table needs a 2-D array with at least 2 rows")
        if len(self.column_kinds) != self.data.shape[1]:
            raise ValueError("one column kind per column is required")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("base table contains non-finite values")

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def n_cols(self) -> int:
        return self.data.shape[1]

    @property
    def columns(self) -> list[NDArray[np.float64]]:
        return [self.data[:, j] for j in range(self.n_cols)]


@dataclass(frozen=True)
class ObservationalTable:
    """The factual data ``(t, x, y)``; the only thing visible at inference."""

    t: NDArray[np.int64]
    x: NDArray[np.float64]
    y: NDArray[np.float64]

    def __post_init__(self):
        t = np.asarray(self.t)
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if t.ndim != 1 or y.ndim != 1 or x.ndim != 2:
            raise ValueError("t and y must be vectors and x a matrix")
        if not (len(t) == len(y) == x.shape[0]):
            raise ValueError("t, x and y must have the same number of rows")
        if len(t) < 1:
            raise ValueError("an observational table needs at least one row")
        if not np.all(np.isin(t, (0, 1))):
            raise ValueError("treatments must be 0 or 1")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("observational table contains non-finite values")
        object.__setattr__(self, "t", t.astype(np.int64))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return len(self.t)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "ObservationalTable":
        idx = np.asarray(idx)
        return ObservationalTable(self.t[idx], self.x[idx], self.y[idx])


@dataclass(frozen=True)
class DgpInstance:
    """One realized DGP sample with ground truth."""

    x: NDArray[np.float64]
    mu0: NDArray[np.float64]
    mu1: NDArray[np.float64]
    y0: NDArray[np.float64]
    y1: NDArray[np.float64]
    p: NDArray[np.float64]
    t: NDArray[np.int64]
    y: NDArray[np.float64]
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_rows(self) -> int:
        return len(self.t)

    @property
    def tau(self) -> NDArray[np.float64]:
        return self.mu1 - self.mu0

    def mu(self, t) -> NDArray[np.float64]:
        """CEPO of arm ``t`` per row (``t`` may be a vector)."""
        return np.where(np.asarray(t) == 1, self.mu1, self.mu0)

    def observational(self) -> ObservationalTable:
        return ObservationalTable(self.t, self.x, self.y)

    def subset(self, idx) -> "DgpInstance":
        idx = np.asarray(idx)
        return DgpInstance(
            self.x[idx], self.mu0[idx], self.mu1[idx], self.y0[idx], self.y1[idx],
            self.p[idx], self.t[idx], self.y[idx], dict(self.meta),
        )


@dataclass(frozen=True)
class DgpConfig:
    seed: int
    n_rows: int
    n_covariates: int
    gamma: float = 1.0
    xi: float = 1.0
    propensity_mechanism: Mechanism = Mechanism.LINEAR
    noise_kind: NoiseKind = NoiseKind.GAUSSIAN
    noise_variance_fraction: float = 1.0
    n_table_cols: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "propensity_mechanism", Mechanism(self.propensity_mechanism))
        object.__setattr__(self, "noise_kind", NoiseKind(self.noise_kind))
        if self.n_rows < 2:
            raise ValueError("n_rows must be at least 2")
        if self.n_covariates < 1:
            raise ValueError("n_covariates must be at least 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.xi <= 1.0:
            raise ValueError(f"xi must lie in [0, 1], got {self.xi}")
        if not 0.0 < self.noise_variance_fraction <= 1.0:
            raise ValueError(f"noise_variance_fraction must lie in (0, 1], got {self.noise_variance_fraction}")
        if self.n_table_cols is not None and self.n_table_cols < max(4, self.n_covariates + 2):
            raise ValueError("n_table_cols must be at least max(4, n_covariates + 2)")


# ---------------------------------------------------------------------------
# base tables
# ---------------------------------------------------------------------------

_ACTIVATIONS: dict[str, Callable[[NDArray], NDArray]] = {
    "tanh": np.tanh,
    "identity": lambda z: z,
    "relu": lambda z: np.maximum(z, 0.0),
    "sine": np.sin,
}
_ACTIVATION_NAMES = tuple(_ACTIVATIONS)


def _random_mlp(rng: np.random.Generator, n_in: int, n_layers: int, widths: Sequence[int]):
    """Draw the weights of a random multilayer map; returns a list of layers."""
    layers = []
    fan_in = n_in
    for layer in range(n_layers):
        width = int(widths[layer])
        w = rng.standard_normal((fan_in, width)) / np.sqrt(fan_in)
        b = 0.5 * rng.standard_normal(width)
        act = _ACTIVATION_NAMES[rng.integers(len(_ACTIVATION_NAMES))]
        layers.append((w, b, act))
        fan_in = width
    return layers


def _apply_mlp(layers, z: NDArray) -> list[NDArray]:
    units = []
    h = z
    for w, b, act in layers:
        h = _ACTIVATIONS[act](h @ w + b)
        units.append(h)
    return units


def synth_base_table(seed: int, n_rows: int, n_cols: int) -> BaseTable:
    """Synthesize a table by reading units of a random multilayer map.

    Standard-normal inputs are pushed through 2-4 random layers; ``n_cols``
    hidden/output units are picked, standardized, and a random subset is
    discretized into at most 8 ordinal levels.
    """
    if n_rows < 2 or n_cols < 4:
        raise ValueError(f"need n_rows >= 2 and n_cols >= 4, got ({n_rows}, {n_cols})")
    arch = _rng(seed, 0)
    n_in = int(arch.integers(2, max(3, n_cols) + 1))
    n_layers = int(arch.integers(2, 5))
    widths = arch.integers(n_cols, 2 * n_cols + 1, size=n_layers)
    layers = _random_mlp(arch, n_in, n_layers, widths)

    z = _rng(seed, 1).standard_normal((n_rows, n_in))
    units = np.concatenate(_apply_mlp(layers, z), axis=1)

    pick = _rng(seed, 2)
    cols = pick.choice(units.shape[1], size=n_cols, replace=False)
    data = units[:, cols].copy()
    kinds = []
    for j in range(n_cols):
        col = data[:, j]
        sd = col.std()
        if sd > 1e-12:
            data[:, j] = (col - col.mean()) / sd
        else:
            data[:, j] = 0.0
        if pick.random() < CATEGORICAL_PROB:
            levels = int(pick.integers(2, MAX_LEVELS + 1))
            cuts = np.quantile(data[:, j], np.linspace(0, 1, levels + 1)[1:-1])
            data[:, j] = np.searchsorted(cuts, data[:, j], side="right").astype(np.float64)
            kinds.append("categorical")
        else:
            kinds.append("continuous")
    return BaseTable(data, tuple(kinds))


# ---------------------------------------------------------------------------
# prior components
# ---------------------------------------------------------------------------


def augment_heterogeneity(mu_raw0, mu_raw1, gamma: float, alpha):
    """Shrink per-unit effects toward the sample ATE while preserving it.

    Returns ``(mu0, mu1)`` with ``mu1 - mu0 = gamma * tau_raw + (1 - gamma) * mean(tau_raw)``.
    """
    mu_raw0 = np.asarray(mu_raw0, dtype=np.float64)
    mu_raw1 = np.asarray(mu_raw1, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if not (mu_raw0.shape == mu_raw1.shape == alpha.shape) or mu_raw0.ndim != 1:
        raise ValueError("mu_raw0, mu_raw1 and alpha must be vectors of equal length")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if np.any((alpha < 0) | (alpha > 1)):
        raise ValueError("alpha entries must lie in [0, 1]")
    lam = np.mean(mu_raw1 - mu_raw0)
    mu1 = (alpha + (1 - alpha) * gamma) * mu_raw1 + (1 - gamma) * (1 - alpha) * (mu_raw0 + lam)
    mu0 = ((1 - alpha) + alpha * gamma) * mu_raw0 + (1 - gamma) * alpha * (mu_raw1 - lam)
    return mu0, mu1


def sample_propensity_logits(x, mechanism, seed: int) -> NDArray[np.float64]:
    """Treatment logits ``f(x)`` under one of the three assignment mechanisms."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("x must be a non-empty matrix")
    mechanism = Mechanism(mechanism)
    rng = _rng(seed, 0)
    n, d = x.shape
    if mechanism is Mechanism.RCT:
        return np.full(n, rng.logistic(0.0, 1.0))
    if mechanism is Mechanism.LINEAR:
        w = rng.standard_normal(d)
        return x @ w
    n_layers = int(rng.integers(2, 5))
    widths = rng.integers(4, 17, size=n_layers)
    layers = _random_mlp(rng, d, n_layers, widths)
    h = _apply_mlp(layers, x)[-1]
    w_out = rng.standard_normal(h.shape[1]) / np.sqrt(h.shape[1])
    return h @ w_out


_P_LO = np.finfo(np.float64).tiny
_P_HI = np.nextafter(1.0, 0.0)


def _sigmoid(f: NDArray) -> NDArray:
    # keep sigmoid propensities strictly inside (0, 1) even for huge logits
    return np.clip(expit(f), _P_LO, _P_HI)


def exacerbate_positivity(logits, xi: float) -> NDArray[np.float64]:
    """Mix sigmoid propensities with a hard threshold: ``xi*sigmoid(f) + (1-xi)*[f>0]``."""
    if not 0.0 <= xi <= 1.0:
        raise ValueError(f"xi must lie in [0, 1], got {xi}")
    f = np.asarray(logits, dtype=np.float64)
    return xi * _sigmoid(f) + (1.0 - xi) * (f > 0).astype(np.float64)


def _unit_noise(rng: np.random.Generator, kind: NoiseKind, n: int) -> NDArray:
    """Zero-mean, unit-variance draws of the given kind."""
    if kind is NoiseKind.GAUSSIAN:
        return rng.standard_normal(n)
    if kind is NoiseKind.LAPLACE:
        return rng.laplace(0.0, 1.0 / np.sqrt(2.0), n)
    if kind is NoiseKind.UNIFORM:
        return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), n)
    return np.zeros(n)


def sample_outcomes(mu0, mu1, eta0, eta1, noise_kind, variance_fraction: float, seed: int):
    """Potential outcomes ``y_t = mu_t + eta_t * eps_t`` with heteroscedastic scale ``eta_t``.

    ``eps_t`` has variance ``variance_fraction * Var(mu_t)``.
    """
    mu0, mu1, eta0, eta1 = (np.asarray(a, dtype=np.float64) for a in (mu0, mu1, eta0, eta1))
    if not (mu0.shape == mu1.shape == eta0.shape == eta1.shape):
        raise ValueError("mu0, mu1, eta0 and eta1 must have equal length")
    kind = NoiseKind(noise_kind)
    if kind is NoiseKind.NONE:
        return mu0.copy(), mu1.copy()
    out = []
    for arm, (mu, eta) in enumerate(((mu0, eta0), (mu1, eta1))):
        eps = _unit_noise(_rng(seed, arm), kind, len(mu)) * np.sqrt(variance_fraction * mu.var())
        out.append(mu + eta * eps)
    return out[0], out[1]


def _assign(p: NDArray, seed: int) -> NDArray[np.int64]:
    u = _rng(seed, 0).random(len(p))
    return (u < p).astype(np.int64)


def sample_dgp(config: DgpConfig) -> DgpInstance:
    """Compose base table, column roles, heterogeneity, propensities and outcomes."""
    d = config.n_covariates
    n_cols = config.n_table_cols if config.n_table_cols is not None else max(4, d + 4)
    table = synth_base_table(derive_seed(config.seed, 0), config.n_rows, n_cols)

    perm = _rng(config.seed, 1).permutation(n_cols)
    ones = np.ones(config.n_rows)
    if n_cols >= d + 4:
        i_mu0, i_mu1, i_eta0, i_eta1 = perm[:4]
        cov_idx = perm[4:4 + d]
        eta0, eta1 = table.data[:, i_eta0], table.data[:, i_eta1]
    else:
        i_mu0, i_mu1 = perm[:2]
        cov_idx = perm[2:2 + d]
        eta0, eta1 = ones, ones
    x = table.data[:, cov_idx]

    alpha = _rng(config.seed, 2).random(config.n_rows)
    mu0, mu1 = augment_heterogeneity(table.data[:, i_mu0], table.data[:, i_mu1], config.gamma, alpha)

    logits = sample_propensity_logits(x, config.propensity_mechanism, derive_seed(config.seed, 3))
    p = exacerbate_positivity(logits, config.xi)
    y0, y1 = sample_outcomes(mu0, mu1, eta0, eta1, config.noise_kind,
                             config.noise_variance_fraction, derive_seed(config.seed, 4))
    t = _assign(p, derive_seed(config.seed, 5))
    y = np.where(t == 1, y1, y0)
    meta = {"family": "causal", "d": d, "gamma": config.gamma, "xi": config.xi,
            "mechanism": config.propensity_mechanism.value, "noise": config.noise_kind.value}
    return DgpInstance(x, mu0, mu1, y0, y1, p, t, y, meta)


# ---------------------------------------------------------------------------
# test-style DGP families
# ---------------------------------------------------------------------------

_FAMILY_NOISE = ("normal", "laplace", "uniform")


def _family_noise(rng: np.random.Generator, kind: str, n: int) -> NDArray:
    if kind == "normal":
        return rng.standard_normal(n)
    if kind == "laplace":
        return rng.laplace(0.0, 1.0, n)
    return rng.uniform(-1.0, 1.0, n)


def _finish_family(seed, x, mu0, mu1, logits, meta) -> DgpInstance:
    n = x.shape[0]
    kind = _FAMILY_NOISE[_rng(seed, 10).integers(3)]
    y0 = mu0 + _family_noise(_rng(seed, 11), kind, n)
    y1 = mu1 + _family_noise(_rng(seed, 12), kind, n)
    p = _sigmoid(logits)
    t = _assign(p, derive_seed(seed, 13))
    y = np.where(t == 1, y1, y0)
    meta = dict(meta, noise=kind)
    return DgpInstance(x, mu0, mu1, y0, y1, p, t, y, meta)


def polynomial_features(x, degree: int) -> NDArray[np.float64]:
    """``[1, x_1..x_d, x_1^2..x_d^2, ..., x_d^degree]`` (width ``d*degree + 1``)."""
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([np.ones((x.shape[0], 1))] + [x**k for k in range(1, degree + 1)], axis=1)


def make_polynomial_dgp(degree: int, seed: int, n_rows: int, weights: Optional[dict] = None) -> DgpInstance:
    """Polynomial family: CEPOs and logits linear in power-extended covariates.

    ``weights`` may override the sampled ``{"mu0", "mu1", "logit"}`` vectors; the
    covariate dimension is then inferred from their length.
    """
    if degree not in (1, 2, 3, 4):
        raise ValueError(f"degree must be in 1..4, got {degree}")
    rng = _rng(seed, 0)
    d = int(rng.integers(10, 21))
    w = {k: rng.uniform(-5, 5, d * degree + 1) for k in ("mu0", "mu1", "logit")}
    if weights is not None:
        w = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
        width = len(w["mu0"])
        if (width - 1) % degree or any(len(v) != width for v in w.values()):
            raise ValueError("weight vectors must share a length of d*degree + 1")
        d = (width - 1) // degree
    x = _rng(seed, 1).uniform(-2.0, 2.0, (n_rows, d))
    feats = polynomial_features(x, degree)
    meta = {"family": "polynomial", "degree": degree, "d": d}
    return _finish_family(seed, x, feats @ w["mu0"], feats @ w["mu1"], feats @ w["logit"], meta)


def sinusoid_linear(x, w, omega: float) -> NDArray[np.float64]:
    """``sin(omega * w'x) + w'x``."""
    z = np.asarray(x, dtype=np.float64) @ np.asarray(w, dtype=np.float64)
    return np.sin(omega * z) + z


def make_sinusoidal_dgp(omega_range, seed: int, n_rows: int, weights: Optional[dict] = None) -> DgpInstance:
    """Sinusoidal family; ``omega_range=(0, 0)`` is the purely linear sub-family."""
    lo, hi = float(omega_range[0]), float(omega_range[1])
    if not 0.0 <= lo <= hi <= 3.0:
        raise ValueError(f"omega_range must lie within [0, 3], got {omega_range}")
    rng = _rng(seed, 0)
    d = int(rng.integers(5, 11))
    w = {k: rng.uniform(-10, 6, d) for k in ("mu0", "mu1", "logit")}
    omega = float(rng.uniform(lo, hi))
    if weights is not None:
        w = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
        d = len(w["mu0"])
    x = _rng(seed, 1).uniform(-3.0, 5.0, (n_rows, d))
    meta = {"family": "sinusoidal", "omega": omega, "d": d}
    return _finish_family(
        seed, x,
        sinusoid_linear(x, w["mu0"], omega), sinusoid_linear(x, w["mu1"], omega),
        sinusoid_linear(x, w["logit"], omega), meta,
    )


# ---------------------------------------------------------------------------
# priors as callables ``(seed, n_rows) -> DgpInstance``
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SinusoidalPrior:
    omega_range: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        lo, hi = (float(v) for v in self.omega_range)
        if not 0.0 <= lo <= hi <= 3.0:
            raise ValueError(f"omega_range must lie within [0, 3], got {self.omega_range}")
        object.__setattr__(self, "omega_range", (lo, hi))

    def __call__(self, seed: int, n_rows: int) -> DgpInstance:
        return make_sinusoidal_dgp(self.omega_range, seed, n_rows)


@dataclass(frozen=True)
class PolynomialPrior:
    degree: int = 1

    def __post_init__(self):
        if self.degree not in (1, 2, 3, 4):
            raise ValueError(f"degree must be in 1..4, got {self.degree}")

    def __call__(self, seed: int, n_rows: int) -> DgpInstance:
        return make_polynomial_dgp(self.degree, seed, n_rows)


@dataclass(frozen=True)
class CausalPrior:
    """The general training prior: random configs fed to :func:`sample_dgp`."""

    max_covariates: int = 20
    gamma: Optional[float] = None
    xi: Optional[float] = None

    def __post_init__(self):
        if self.max_covariates < 1:
            raise ValueError("max_covariates must be at least 1")
        for name in ("gamma", "xi"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def draw_config(self, seed: int, n_rows: int) -> DgpConfig:
        rng = _rng(seed, 99)
        d = int(rng.integers(1, self.max_covariates + 1))
        gamma = float(rng.random()) if self.gamma is None else self.gamma
        xi = float(rng.random()) if self.xi is None else self.xi
        mech = list(Mechanism)[rng.integers(3)]
        noise = (NoiseKind.GAUSSIAN, NoiseKind.LAPLACE, NoiseKind.UNIFORM)[rng.integers(3)]
        frac = 1.0 - float(rng.random())
        return DgpConfig(seed=derive_seed(seed, 100), n_rows=n_rows, n_covariates=d, gamma=gamma,
                         xi=xi, propensity_mechanism=mech, noise_kind=noise, noise_variance_fraction=frac)

    def __call__(self, seed: int, n_rows: int) -> DgpInstance:
        return sample_dgp(self.draw_config(seed, n_rows))


def prior_from_spec(spec: dict):
    """Build a prior callable from ``{"family": ..., **params}``."""
    spec = dict(spec)
    family = spec.pop("family", "sinusoidal")
    if family == "sinusoidal":
        return SinusoidalPrior(tuple(spec.pop("omega_range", (0.0, 0.0))), **spec)
    if family == "polynomial":
        return PolynomialPrior(**spec)
    if family == "causal":
        return CausalPrior(**spec)
    raise ValueError(f"unknown prior family {family!r}")


# ---------------------------------------------------------------------------
# CSV exchange
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_rows(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_dgp_csv(instance: DgpInstance, out_dir, name: str) -> tuple[Path, Path]:
    """Write ``<name>.obs.csv`` (``t,y,x1..xd``) and ``<name>.truth.csv`` (``mu0,mu1,p``)."""
    out_dir = Path(out_dir)
    d = instance.x.shape[1]
    obs = out_dir / f"{name}.obs.csv"
    truth = out_dir / f"{name}.truth.csv"
    _write_rows(obs, ["t", "y"] + [f"x{j + 1}" for j in range(d)],
                ([str(int(t)), _fmt(y), *map(_fmt, xr)] for t, y, xr in zip(instance.t, instance.y, instance.x)))
    _write_rows(truth, ["mu0", "mu1", "p"],
                ([_fmt(a), _fmt(b), _fmt(c)] for a, b, c in zip(instance.mu0, instance.mu1, instance.p)))
    return obs, truth


def read_observational_csv(path) -> ObservationalTable:
    """Parse a ``t,y,x1..xd`` file; raises ``ValueError`` naming any missing column."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        header = [h.strip() for h in header]
        for required in ("t", "y"):
            if required not in header:
                raise ValueError(f"{path}: missing required column '{required}'")
        x_cols = [h for h in header if h.startswith("x")]
        if not x_cols:
            raise ValueError(f"{path}: missing covariate columns 'x1..xd'")
        rows = [r for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    idx = {h: i for i, h in enumerate(header)}
    try:
        arr = np.array([[float(r[idx[h]]) for h in ["t", "y", *x_cols]] for r in rows])
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}: could not parse numeric values ({exc})") from exc
    return ObservationalTable(arr[:, 0].astype(np.int64), arr[:, 2:], arr[:, 1])


def read_truth_csv(path) -> dict[str, NDArray[np.float64]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    return {k: np.array([float(r[k]) for r in rows]) for k in ("mu0", "mu1", "p")}
