"""
Exact Bayesian inference over finite families of discrete DGPs.

Every family member is a set of finite tables ``P(U)``, ``P(X|U)``,
``P(T=1|X,U)`` and ``P(Y_t|X,U)``. Observational laws come from summing out
``U``; posteriors follow from counting cells, so everything here is exact up
to float rounding. The module serves three checks:

* posterior-mean CEPOs converge to the truth when the family is identifiable,
* they do not for an observationally equivalent but causally different pair,
* the causal data-prior loss and the expected forward KL differ by a constant.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.special import gammaln, logsumexp

from .prior import ObservationalTable

MAX_SUPPORT = 4
MAX_FAMILY = 64
MAX_ENUMERATION = 200_000
ROW_TOL = 1e-12


class InconsistentDataError(ValueError):
    """Every family member assigns the data zero probability."""


class EnumerationTooLarge(ValueError):
    pass


def _check_rows(name: str, table: NDArray, axis: int = -1) -> None:
    if np.any(table < 0) or np.any(np.abs(table.sum(axis=axis) - 1.0) > ROW_TOL):
        raise ValueError(f"rows of {name} must be nonnegative and sum to 1")


@dataclass(frozen=True)
class DiscreteDgp:
    """One finite DGP.

    Shapes: ``p_u`` (U,), ``p_x_u`` (U, X), ``p_t_xu`` (U, X) holding
    ``P(T=1|x,u)``, ``p_y_txu`` (2, U, X, Y) and ``y_values`` (Y,).
    """

    p_u: NDArray[np.float64]
    p_x_u: NDArray[np.float64]
    p_t_xu: NDArray[np.float64]
    p_y_txu: NDArray[np.float64]
    y_values: NDArray[np.float64] = field(default_factory=lambda: np.array([0.0, 1.0]))

    def __post_init__(self):
        arrs = {k: np.asarray(getattr(self, k), dtype=np.float64)
                for k in ("p_u", "p_x_u", "p_t_xu", "p_y_txu", "y_values")}
        for k, v in arrs.items():
            object.__setattr__(self, k, v)
        nu, nx, ny = len(arrs["p_u"]), arrs["p_x_u"].shape[1], len(arrs["y_values"])
        if max(nu, nx, ny) > MAX_SUPPORT:
            raise ValueError(f"supports are capped at {MAX_SUPPORT} values")
        if arrs["p_x_u"].shape != (nu, nx) or arrs["p_t_xu"].shape != (nu, nx):
            raise ValueError("p_x_u and p_t_xu must have shape (|U|, |X|)")
        if arrs["p_y_txu"].shape != (2, nu, nx, ny):
            raise ValueError("p_y_txu must have shape (2, |U|, |X|, |Y|)")
        if len(np.unique(arrs["y_values"])) != ny:
            raise ValueError("y_values must be distinct")
        _check_rows("p_u", arrs["p_u"])
        _check_rows("p_x_u", arrs["p_x_u"])
        _check_rows("p_y_txu", arrs["p_y_txu"])
        if np.any((arrs["p_t_xu"] < 0) | (arrs["p_t_xu"] > 1)):
            raise ValueError("p_t_xu entries must lie in [0, 1]")

    @property
    def n_x(self) -> int:
        return self.p_x_u.shape[1]

    @property
    def n_y(self) -> int:
        return len(self.y_values)

    def p_x(self) -> NDArray[np.float64]:
        return self.p_u @ self.p_x_u

    def obs_joint(self) -> NDArray[np.float64]:
        """``P(x, t, y)`` with shape (X, 2, Y)."""
        pux = self.p_u[:, None] * self.p_x_u
        pt = np.stack([1.0 - self.p_t_xu, self.p_t_xu])
        return np.einsum("ux,tux,tuxy->xty", pux, pt, self.p_y_txu)

    def cepo(self) -> NDArray[np.float64]:
        """``mu_t(x) = sum_u E[Y_t|x,u] P(u|x)``, shape (2, X)."""
        pux = self.p_u[:, None] * self.p_x_u
        px = pux.sum(axis=0)
        post_u = np.divide(pux, px, out=np.zeros_like(pux), where=px > 0)
        ey = self.p_y_txu @ self.y_values
        return np.einsum("tux,ux->tx", ey, post_u)

    def sample(self, n: int, rng: np.random.Generator) -> ObservationalTable:
        joint = self.obs_joint().ravel()
        cells = rng.choice(joint.size, size=n, p=joint / joint.sum())
        x, t, y = np.unravel_index(cells, (self.n_x, 2, self.n_y))
        return ObservationalTable(t.astype(np.int64), x.astype(np.float64)[:, None], self.y_values[y])


@dataclass(frozen=True)
class DiscreteDgpFamily:
    members: tuple
    prior: NDArray[np.float64]

    def __post_init__(self):
        members = tuple(self.members)
        prior = np.asarray(self.prior, dtype=np.float64)
        if not 1 <= len(members) <= MAX_FAMILY:
            raise ValueError(f"a family holds between 1 and {MAX_FAMILY} members")
        if prior.shape != (len(members),):
            raise ValueError("one prior weight per member is required")
        _check_rows("prior", prior)
        nx = {m.n_x for m in members}
        ys = {tuple(m.y_values) for m in members}
        if len(nx) != 1 or len(ys) != 1:
            raise ValueError("members must share the X and Y supports")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "prior", prior)

    @classmethod
    def uniform(cls, members: Sequence[DiscreteDgp]) -> "DiscreteDgpFamily":
        return cls(tuple(members), np.full(len(members), 1.0 / len(members)))

    def __len__(self) -> int:
        return len(self.members)

    @property
    def n_x(self) -> int:
        return self.members[0].n_x

    @property
    def y_values(self) -> NDArray[np.float64]:
        return self.members[0].y_values

    def log_joints(self) -> NDArray[np.float64]:
        """``log P^psi(x, t, y)``, shape (K, X, 2, Y)."""
        with np.errstate(divide="ignore"):
            return np.log(np.stack([m.obs_joint() for m in self.members]))

    def cepos(self) -> NDArray[np.float64]:
        return np.stack([m.cepo() for m in self.members])


@dataclass(frozen=True)
class DiscretePpd:
    atoms: NDArray[np.float64]
    probs: NDArray[np.float64]

    def __post_init__(self):
        if len(np.unique(self.atoms)) != len(self.atoms):
            raise ValueError("atoms must be distinct")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("atom probabilities must be nonnegative and sum to 1")

    @property
    def mean(self) -> float:
        return float(self.atoms @ self.probs)


# ---------------------------------------------------------------------------
# likelihoods and posteriors
# ---------------------------------------------------------------------------


def cell_counts(table: Optional[ObservationalTable], n_x: int, y_values) -> NDArray[np.int64]:
    """Counts over the (X, 2, Y) cells; ``None`` is the empty dataset. Raises on out-of-support values."""
    y_values = np.asarray(y_values, dtype=np.float64)
    counts = np.zeros((n_x, 2, len(y_values)), dtype=np.int64)
    if table is None:
        return counts
    x = table.x[:, 0]
    xi = x.astype(np.int64)
    if np.any(xi != x) or np.any((xi < 0) | (xi >= n_x)):
        raise ValueError(f"x values must be integers in [0, {n_x})")
    yi = np.searchsorted(np.sort(y_values), table.y)
    order = np.argsort(y_values)
    ok = (yi < len(y_values)) & (np.sort(y_values)[np.minimum(yi, len(y_values) - 1)] == table.y)
    if not np.all(ok):
        raise ValueError("y values outside the family's outcome support")
    np.add.at(counts, (xi, table.t, order[yi]), 1)
    return counts


def _loglik_counts(log_joint: NDArray, counts: NDArray) -> NDArray[np.float64]:
    """Sum of ``counts * log_joint`` over the trailing cell axes, with ``0 * log 0 = 0``."""
    lj = np.where(counts > 0, log_joint, 0.0)
    return (lj * counts).reshape(lj.shape[0], -1).sum(axis=1)


def obs_likelihood(dgp: DiscreteDgp, table: Optional[ObservationalTable]) -> float:
    counts = cell_counts(table, dgp.n_x, dgp.y_values)
    with np.errstate(divide="ignore"):
        lj = np.log(dgp.obs_joint())[None]
    return float(_loglik_counts(lj, counts[None])[0])


def posterior_from_counts(family: DiscreteDgpFamily, counts: NDArray) -> NDArray[np.float64]:
    if not np.any(counts):
        return family.prior.copy()
    with np.errstate(divide="ignore"):
        logw = np.log(family.prior) + _loglik_counts(family.log_joints(), np.broadcast_to(
            counts, (len(family),) + counts.shape))
    if not np.isfinite(logw).any():
        raise InconsistentDataError("the data have zero probability under every family member")
    w = np.exp(logw - logw.max())
    return w / w.sum()


def exact_posterior(family: DiscreteDgpFamily, table: Optional[ObservationalTable]) -> NDArray[np.float64]:
    return posterior_from_counts(family, cell_counts(table, family.n_x, family.y_values))


def pushforward(values: NDArray, weights: NDArray) -> DiscretePpd:
    atoms, inverse = np.unique(values, return_inverse=True)
    probs = np.bincount(inverse, weights=weights, minlength=len(atoms))
    return DiscretePpd(atoms, probs)


def exact_cepo_ppd(family: DiscreteDgpFamily, table: Optional[ObservationalTable], x: int, t: int) -> DiscretePpd:
    """Posterior pushforward of ``mu_t(x)``; members sharing a value share an atom."""
    if not 0 <= x < family.n_x:
        raise ValueError(f"x must lie in [0, {family.n_x})")
    w = exact_posterior(family, table)
    return pushforward(family.cepos()[:, t, x], w)


# ---------------------------------------------------------------------------
# consistency
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConsistencyResult:
    n_grid: NDArray[np.int64]
    errors: NDArray[np.float64]  # (seeds, n)
    posterior_sd: NDArray[np.float64]  # (seeds, n)
    tolerance: float = 0.02

    @property
    def mean_abs_error(self) -> NDArray[np.float64]:
        return self.errors.mean(axis=0)

    @property
    def mean_posterior_sd(self) -> NDArray[np.float64]:
        return self.posterior_sd.mean(axis=0)

    @property
    def nonincreasing(self) -> bool:
        e = self.mean_abs_error
        return bool(np.all(np.diff(e) <= 1e-12))

    @property
    def consistent(self) -> bool:
        return self.nonincreasing and bool(self.mean_abs_error[-1] < self.tolerance)


def consistency_experiment(family: DiscreteDgpFamily, psi_true: DiscreteDgp, n_grid=(100, 1000, 10_000),
                           n_seeds: int = 20, seed: int = 0, tolerance: float = 0.02) -> ConsistencyResult:
    """Posterior-mean CEPO error as the sample grows; each seed's samples are nested prefixes."""
    n_grid = np.asarray(sorted(n_grid), dtype=np.int64)
    cepos = family.cepos()  # (K, 2, X)
    truth = psi_true.cepo()
    errors = np.empty((n_seeds, len(n_grid)))
    sds = np.empty_like(errors)
    for s in range(n_seeds):
        rng = np.random.default_rng(np.random.SeedSequence([seed, s]))
        data = psi_true.sample(int(n_grid[-1]), rng)
        for j, n in enumerate(n_grid):
            w = exact_posterior(family, data.subset(np.arange(n)))
            mean = np.einsum("k,ktx->tx", w, cepos)
            var = np.einsum("k,ktx->tx", w, (cepos - mean) ** 2)
            errors[s, j] = np.abs(mean - truth).mean()
            sds[s, j] = np.sqrt(var).mean()
    return ConsistencyResult(n_grid, errors, sds, tolerance)


def identifiable_family() -> DiscreteDgpFamily:
    """36 ignorable binary-outcome DGPs over X in {0, 1} with distinct observational laws."""
    members = [_ignorable((0.3, 0.7), (a0, a1), (b0, b1))
               for a0, a1 in itertools.product((0.25, 0.5, 0.75), repeat=2)
               for b0, b1 in itertools.product((0.25, 0.75), repeat=2)]
    return DiscreteDgpFamily.uniform(members)


def misspecified_truth() -> DiscreteDgp:
    """A DGP outside :func:`identifiable_family`: one treated-outcome rate is 0.6."""
    return _ignorable((0.3, 0.7), (0.6, 0.5), (0.25, 0.75))


def _ignorable(prop, p1, p0) -> DiscreteDgp:
    """Trivial ``U``, uniform X; ``p1``/``p0`` are ``P(Y_t=1|x)`` per x."""
    nx = len(prop)
    y = np.zeros((2, 1, nx, 2))
    y[1, 0, :, 1], y[0, 0, :, 1] = p1, p0
    y[:, :, :, 0] = 1.0 - y[:, :, :, 1]
    return DiscreteDgp(np.ones(1), np.full((1, nx), 1.0 / nx), np.asarray(prop, dtype=np.float64)[None], y)


# ---------------------------------------------------------------------------
# non-identifiable pair
# ---------------------------------------------------------------------------


def confounded_pair() -> DiscreteDgpFamily:
    """``psi_a``: U ~ Bern(1/2), T = U, Y_t = U. ``psi_b``: T ~ Bern(1/2), Y_t = t."""
    y_a = np.zeros((2, 2, 1, 2))
    y_a[:, 0, 0, 0] = 1.0  # u = 0 -> y = 0 under either t
    y_a[:, 1, 0, 1] = 1.0
    psi_a = DiscreteDgp(np.array([0.5, 0.5]), np.ones((2, 1)), np.array([[0.0], [1.0]]), y_a)
    y_b = np.zeros((2, 1, 1, 2))
    y_b[0, 0, 0, 0] = 1.0
    y_b[1, 0, 0, 1] = 1.0
    psi_b = DiscreteDgp(np.ones(1), np.ones((1, 1)), np.array([[0.5]]), y_b)
    return DiscreteDgpFamily.uniform([psi_a, psi_b])


def nonidentifiable_counterexample(n_grid=(10, 100, 1000, 10_000), seed: int = 0):
    """The confounded pair and a report of its posterior under growing samples from each member."""
    family = confounded_pair()
    cepos = family.cepos()
    rows = []
    for k, truth in enumerate(family.members):
        data = truth.sample(max(n_grid), np.random.default_rng(np.random.SeedSequence([seed, k])))
        for n in n_grid:
            w = exact_posterior(family, data.subset(np.arange(n)))
            mu1 = float(w @ cepos[:, 1, 0])
            mu0 = float(w @ cepos[:, 0, 0])
            rows.append({"truth": k, "n": int(n), "posterior": w.tolist(), "mu1": mu1,
                         "cate": mu1 - mu0, "true_cate": float(cepos[k, 1, 0] - cepos[k, 0, 0])})
    report = {
        "rows": rows,
        "posterior_equals_prior": all(r["posterior"] == family.prior.tolist() for r in rows),
        "posterior_mean_mu1": sorted({r["mu1"] for r in rows}),
        "posterior_mean_cate": sorted({r["cate"] for r in rows}),
        "consistent": all(r["cate"] == r["true_cate"] for r in rows),
    }
    return family, report


# ---------------------------------------------------------------------------
# loss equivalence
# ---------------------------------------------------------------------------


def random_discrete_family(seed: int, n_members: int = 4, n_x: int = 2, n_u: int = 2, n_y: int = 2,
                           concentration: float = 1.0) -> DiscreteDgpFamily:
    rng = np.random.default_rng(seed)
    y_values = np.arange(n_y, dtype=np.float64)
    members = []
    for _ in range(n_members):
        members.append(DiscreteDgp(
            rng.dirichlet(np.full(n_u, concentration)),
            rng.dirichlet(np.full(n_x, concentration), size=n_u),
            rng.uniform(0.05, 0.95, (n_u, n_x)),
            rng.dirichlet(np.full(n_y, concentration), size=(2, n_u, n_x)),
            y_values,
        ))
    return DiscreteDgpFamily(tuple(members), rng.dirichlet(np.ones(n_members)))


@dataclass(frozen=True)
class KlEquivalenceResult:
    loss_t: NDArray[np.float64]
    loss_kl: NDArray[np.float64]
    constant: float
    max_dev: float
    argmin_match: bool
    n_keys: int


def _multisets(n_cells: int, n: int):
    for combo in itertools.combinations_with_replacement(range(n_cells), n):
        counts = np.bincount(np.asarray(combo, dtype=np.int64), minlength=n_cells)
        yield counts


def kl_equivalence_check(family: DiscreteDgpFamily, n: int = 2, n_thetas: int = 10, seed: int = 0,
                         t: int = 1) -> KlEquivalenceResult:
    """Both losses by full enumeration of ``(D, x)`` for a per-key softmax family ``q_theta``.

    ``q_theta`` has free logits for every (multiset D, query x) over the set
    of distinct CEPO values. The grid holds ``n_thetas`` Gaussian draws and
    the exact posterior-predictive (last entry).
    """
    n_cells = family.n_x * 2 * len(family.y_values)
    n_sets = math.comb(n_cells + n - 1, n)
    if n_sets * family.n_x * len(family) > MAX_ENUMERATION:
        raise EnumerationTooLarge(f"{n_sets} datasets x {family.n_x} queries x {len(family)} members")
    K = len(family)
    log_joint = family.log_joints().reshape(K, n_cells)
    with np.errstate(divide="ignore"):
        log_px = np.log(np.stack([m.p_x() for m in family.members]))  # (K, X)
    mu = family.cepos()[:, t, :]  # (K, X)
    atoms, atom_idx = np.unique(mu, return_inverse=True)
    atom_idx = atom_idx.reshape(mu.shape)
    A = len(atoms)

    # joint weight of (psi, D, x) for every key (D, x)
    log_weights = []
    for counts in _multisets(n_cells, n):
        log_coef = gammaln(n + 1) - gammaln(counts + 1).sum()
        lik = _loglik_counts(log_joint, np.broadcast_to(counts, (K, n_cells)))
        log_weights.append(np.log(family.prior)[:, None] + log_coef + lik[:, None] + log_px)
    lw = np.stack(log_weights)  # (D, K, X)
    w = np.exp(lw)
    n_keys = lw.shape[0] * family.n_x
    onehot = np.eye(A)[atom_idx]  # (K, X, A)
    # target mass per key and atom: sum_psi w * [mu_psi(x) = atom]
    mass = np.einsum("dkx,kxa->dxa", w, onehot)
    marg = mass.sum(axis=2, keepdims=True)
    ppd = np.divide(mass, marg, out=np.zeros_like(mass), where=marg > 0)

    rng = np.random.default_rng(seed)
    thetas = [rng.normal(0.0, 2.0, mass.shape) for _ in range(n_thetas)]
    with np.errstate(divide="ignore"):
        # keys with zero probability get flat logits; they carry no weight in either loss
        thetas.append(np.where(marg > 0, np.log(ppd), 0.0))
    loss_t, loss_kl = [], []
    for theta in thetas:
        log_q = theta - logsumexp(theta, axis=2, keepdims=True)
        safe_q = np.where(mass > 0, log_q, 0.0)
        loss_t.append(float(-(mass * safe_q).sum()))
        with np.errstate(divide="ignore"):
            log_p = np.where(mass > 0, np.log(np.where(ppd > 0, ppd, 1.0)), 0.0)
        loss_kl.append(float((mass * (log_p - safe_q)).sum()))
    loss_t, loss_kl = np.array(loss_t), np.array(loss_kl)
    diff = loss_t - loss_kl
    c = float(diff.mean())
    return KlEquivalenceResult(loss_t, loss_kl, c, float(np.abs(diff - c).max()),
                               bool(np.argmin(loss_t) == np.argmin(loss_kl)), n_keys)
