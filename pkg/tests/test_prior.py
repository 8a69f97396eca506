import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import expit

from amortized_cate.prior import (
    CausalPrior,
    DgpConfig,
    Mechanism,
    NoiseKind,
    ObservationalTable,
    PolynomialPrior,
    SinusoidalPrior,
    augment_heterogeneity,
    exacerbate_positivity,
    make_polynomial_dgp,
    make_sinusoidal_dgp,
    polynomial_features,
    read_observational_csv,
    read_truth_csv,
    sample_dgp,
    sample_outcomes,
    sample_propensity_logits,
    synth_base_table,
    write_dgp_csv,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


# ---------------------------------------------------------------------------
# base tables


def test_base_table_deterministic():
    a = synth_base_table(7, 100, 6)
    b = synth_base_table(7, 100, 6)
    assert a.data.shape == (100, 6)
    assert np.all(np.isfinite(a.data))
    assert a.data.tobytes() == b.data.tobytes()


def test_base_table_seed_sensitive():
    assert not np.array_equal(synth_base_table(7, 100, 6).data, synth_base_table(8, 100, 6).data)


def test_categorical_columns_have_few_levels():
    seen = 0
    for seed in range(1, 30):
        table = synth_base_table(seed, 1000, 8)
        for col, kind in zip(table.columns, table.column_kinds):
            if kind == "categorical":
                seen += 1
                assert len(np.unique(col)) <= 8
    assert seen > 0


@pytest.mark.parametrize("n_rows,n_cols", [(1, 6), (10, 3)])
def test_base_table_rejects_bad_sizes(n_rows, n_cols):
    with pytest.raises(ValueError):
        synth_base_table(0, n_rows, n_cols)


# ---------------------------------------------------------------------------
# heterogeneity


def test_gamma_one_is_identity():
    rng = np.random.default_rng(0)
    m0, m1, a = rng.normal(size=50), rng.normal(size=50), rng.random(50)
    mu0, mu1 = augment_heterogeneity(m0, m1, 1.0, a)
    np.testing.assert_array_equal(mu0, m0)
    np.testing.assert_array_equal(mu1, m1)


def test_gamma_zero_gives_constant_effect():
    rng = np.random.default_rng(1)
    m0, m1, a = rng.normal(size=50), rng.normal(size=50), rng.random(50)
    mu0, mu1 = augment_heterogeneity(m0, m1, 0.0, a)
    np.testing.assert_allclose(mu1 - mu0, np.mean(m1 - m0), atol=1e-12)


def test_half_gamma_hand_example():
    mu0, mu1 = augment_heterogeneity(np.zeros(2), np.array([2.0, 4.0]), 0.5, np.array([0.3, 0.9]))
    np.testing.assert_allclose(mu1 - mu0, [2.5, 3.5], atol=1e-12)


def test_heterogeneity_length_mismatch():
    with pytest.raises(ValueError):
        augment_heterogeneity(np.zeros(3), np.zeros(2), 0.5, np.zeros(3))


@settings(max_examples=200, deadline=None)
@given(n=st.integers(2, 40), gamma=st.floats(0, 1), seed=st.integers(0, 2**31))
def test_heterogeneity_moments(n, gamma, seed):
    rng = np.random.default_rng(seed)
    m0, m1, a = rng.normal(0, 5, n), rng.normal(0, 5, n), rng.random(n)
    mu0, mu1 = augment_heterogeneity(m0, m1, gamma, a)
    tau, tau_raw = mu1 - mu0, m1 - m0
    assert abs(tau.mean() - tau_raw.mean()) < 1e-10
    assert abs(tau.var() - gamma**2 * tau_raw.var()) < 1e-10


# ---------------------------------------------------------------------------
# propensities


def test_rct_logits_constant():
    f = sample_propensity_logits(np.random.default_rng(0).normal(size=(30, 4)), Mechanism.RCT, 3)
    assert np.all(f == f[0])


def test_linear_logits_zero_input():
    np.testing.assert_array_equal(sample_propensity_logits(np.zeros((5, 3)), "Linear", 1), np.zeros(5))


def test_linear_logits_are_xw():
    e = sample_propensity_logits(np.eye(2), "Linear", 11)
    x = np.array([[1.5, -2.0], [0.25, 3.0]])
    np.testing.assert_allclose(sample_propensity_logits(x, "Linear", 11), x @ e, rtol=1e-12)


def test_nonlinear_logits_deterministic():
    x = np.random.default_rng(2).normal(size=(20, 3))
    a = sample_propensity_logits(x, "Nonlinear", 5)
    np.testing.assert_array_equal(a, sample_propensity_logits(x, "Nonlinear", 5))
    assert np.all(np.isfinite(a))


def test_positivity_examples():
    f = np.array([-1.0, 2.0])
    np.testing.assert_allclose(exacerbate_positivity(f, 1.0), expit(f))
    np.testing.assert_array_equal(exacerbate_positivity(f, 0.0), [0.0, 1.0])
    assert exacerbate_positivity(np.array([0.0]), 0.5)[0] == 0.25


def test_positivity_rejects_bad_xi():
    with pytest.raises(ValueError):
        exacerbate_positivity(np.zeros(2), 1.5)


@given(f=arrays(np.float64, st.integers(2, 30), elements=finite), xi=st.floats(0, 1))
def test_positivity_monotone_and_bounded(f, xi):
    order = np.argsort(f, kind="stable")
    p = exacerbate_positivity(f[order], xi)
    assert np.all((p >= 0) & (p <= 1))
    assert np.all(np.diff(p) >= -1e-15)


def test_positivity_strict_for_xi_one_with_large_logits():
    p = exacerbate_positivity(np.array([-800.0, 800.0]), 1.0)
    assert np.all((p > 0) & (p < 1))


# ---------------------------------------------------------------------------
# outcomes


def test_noiseless_outcomes():
    rng = np.random.default_rng(0)
    mu0, mu1, eta = rng.normal(size=10), rng.normal(size=10), rng.random(10)
    y0, y1 = sample_outcomes(mu0, mu1, eta, eta, NoiseKind.NONE, 0.5, 1)
    np.testing.assert_array_equal(y0, mu0)
    np.testing.assert_array_equal(y1, mu1)


def test_zero_scale_outcomes():
    rng = np.random.default_rng(0)
    mu0, mu1 = rng.normal(size=10), rng.normal(size=10)
    for kind in ("Gaussian", "Laplace", "Uniform"):
        y0, y1 = sample_outcomes(mu0, mu1, np.zeros(10), np.zeros(10), kind, 1.0, 2)
        np.testing.assert_array_equal(y0, mu0)
        np.testing.assert_array_equal(y1, mu1)


def test_constant_mu_means_zero_noise():
    y0, y1 = sample_outcomes(np.full(5, 2.0), np.full(5, 3.0), np.ones(5), np.ones(5), "Gaussian", 1.0, 0)
    np.testing.assert_array_equal(y0, 2.0)
    np.testing.assert_array_equal(y1, 3.0)


@pytest.mark.parametrize("kind", ["Gaussian", "Laplace", "Uniform"])
def test_noise_zero_mean_and_target_variance(kind):
    n = 100_000
    mu = np.random.default_rng(3).normal(0, 2, n)
    y0, _ = sample_outcomes(mu, mu, np.ones(n), np.ones(n), kind, 0.5, 9)
    eps = y0 - mu
    target = 0.5 * mu.var()
    assert abs(eps.mean()) < 4 * np.sqrt(target / n)
    assert abs(eps.var() / target - 1) < 0.05


# ---------------------------------------------------------------------------
# composed DGPs


def _cfg(**kw):
    base = dict(seed=4, n_rows=300, n_covariates=5)
    base.update(kw)
    return DgpConfig(**base)


def test_config_validation_names_field():
    with pytest.raises(ValueError, match="gamma"):
        _cfg(gamma=1.5)
    with pytest.raises(ValueError, match="xi"):
        _cfg(xi=-0.1)
    with pytest.raises(ValueError, match="noise_variance_fraction"):
        _cfg(noise_variance_fraction=0.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**40), gamma=st.floats(0, 1), xi=st.floats(0, 1),
       mech=st.sampled_from(list(Mechanism)), noise=st.sampled_from(list(NoiseKind)), d=st.integers(1, 8))
def test_dgp_invariants(seed, gamma, xi, mech, noise, d):
    inst = sample_dgp(_cfg(seed=seed, gamma=gamma, xi=xi, propensity_mechanism=mech, noise_kind=noise,
                           n_covariates=d, n_rows=50))
    np.testing.assert_array_equal(inst.y, np.where(inst.t == 1, inst.y1, inst.y0))
    assert np.all((inst.p >= 0) & (inst.p <= 1))
    assert np.all(np.isfinite(inst.mu0)) and np.all(np.isfinite(inst.mu1))
    assert inst.x.shape == (50, d)
    if xi == 1.0:
        assert np.all((inst.p > 0) & (inst.p < 1))


def test_dgp_deterministic():
    a, b = sample_dgp(_cfg()), sample_dgp(_cfg())
    for field in ("x", "mu0", "mu1", "y0", "y1", "p", "t", "y"):
        assert getattr(a, field).tobytes() == getattr(b, field).tobytes()


def test_narrow_table_uses_unit_nuisance():
    inst = sample_dgp(_cfg(n_covariates=3, n_table_cols=5, noise_kind="None"))
    assert inst.x.shape[1] == 3
    np.testing.assert_array_equal(inst.y0, inst.mu0)


def test_rct_treated_fraction():
    n = 100_000
    cfg = _cfg(n_rows=n, propensity_mechanism="RCT", n_covariates=2)
    inst = sample_dgp(cfg)
    p = inst.p[0]
    assert np.all(inst.p == p)
    assert abs(inst.t.mean() - p) < 4 * np.sqrt(p * (1 - p) / n)


def test_assignment_ignores_outcomes():
    # same covariates and propensities, different noise -> same treatments
    a = sample_dgp(_cfg(noise_kind="Gaussian"))
    b = sample_dgp(_cfg(noise_kind="Laplace"))
    np.testing.assert_array_equal(a.p, b.p)
    np.testing.assert_array_equal(a.t, b.t)


def test_causal_prior_validation():
    with pytest.raises(ValueError, match="gamma"):
        CausalPrior(gamma=1.5)
    inst = CausalPrior(max_covariates=6)(3, 40)
    assert 1 <= inst.x.shape[1] <= 6


# ---------------------------------------------------------------------------
# evaluation families


def test_polynomial_zero_weights_constant():
    w = {k: np.zeros(polynomial_features(np.zeros((1, 3)), 1).shape[1]) for k in ("mu0", "mu1", "logit")}
    w["mu0"][0], w["mu1"][0] = 1.5, -2.0
    inst = make_polynomial_dgp(1, 0, 30, weights=w)
    np.testing.assert_array_equal(inst.mu0, 1.5)
    np.testing.assert_array_equal(inst.mu1, -2.0)


def test_polynomial_hand_evaluation():
    w = {"mu0": np.array([1.0, -2.0, 0.5]), "mu1": np.array([0.0, 1.0, 1.0]), "logit": np.zeros(3)}
    inst = make_polynomial_dgp(2, 1, 200, weights=w)
    x = inst.x[:, 0]
    np.testing.assert_allclose(inst.mu0, 1.0 - 2.0 * x + 0.5 * x**2, rtol=1e-12)
    probe = np.array([[-2.0], [0.0], [2.0]])
    np.testing.assert_allclose(polynomial_features(probe, 2) @ w["mu0"], [7.0, 1.0, -1.0])


def test_polynomial_feature_width():
    inst = make_polynomial_dgp(4, 5, 10)
    d = inst.x.shape[1]
    assert 10 <= d <= 20
    assert polynomial_features(inst.x, 4).shape[1] == 4 * d + 1
    assert inst.x.min() >= -2 and inst.x.max() <= 2


def test_sinusoidal_linear_subfamily():
    w = {"mu0": np.array([1.0, -2.0]), "mu1": np.array([0.5, 0.5]), "logit": np.zeros(2)}
    inst = make_sinusoidal_dgp((0, 0), 3, 50, weights=w)
    np.testing.assert_array_equal(inst.mu0, inst.x @ w["mu0"])


def test_sinusoidal_probe_point():
    from amortized_cate.prior import sinusoid_linear
    x = np.array([[np.pi / 2, 0.0]])
    w = np.array([1.0, 3.0])
    assert sinusoid_linear(x, w, 1.0)[0] == pytest.approx(1 + np.pi / 2, abs=1e-12)


@pytest.mark.parametrize("rng_", [(0.0, 1.0), (1.0, 2.0), (2.5, 3.0)])
def test_sinusoidal_omega_in_range(rng_):
    for seed in range(20):
        om = make_sinusoidal_dgp(rng_, seed, 5).meta["omega"]
        assert rng_[0] <= om <= rng_[1]


def test_family_prefix_property():
    small, big = SinusoidalPrior((0, 0))(12, 64), SinusoidalPrior((0, 0))(12, 256)
    np.testing.assert_array_equal(small.x, big.x[:64])
    np.testing.assert_array_equal(small.mu1, big.mu1[:64])
    p_small, p_big = PolynomialPrior(2)(4, 32), PolynomialPrior(2)(4, 96)
    np.testing.assert_array_equal(p_small.y, p_big.y[:32])


def test_family_validation():
    with pytest.raises(ValueError):
        SinusoidalPrior((0, 4))
    with pytest.raises(ValueError):
        PolynomialPrior(5)


# ---------------------------------------------------------------------------
# CSV exchange


def test_csv_round_trip(tmp_path):
    inst = make_sinusoidal_dgp((0, 1), 2, 25)
    obs, truth = write_dgp_csv(inst, tmp_path, "demo")
    table = read_observational_csv(obs)
    np.testing.assert_array_equal(table.y, inst.y)
    np.testing.assert_array_equal(table.x, inst.x)
    np.testing.assert_array_equal(table.t, inst.t)
    tr = read_truth_csv(truth)
    np.testing.assert_array_equal(tr["mu1"], inst.mu1)
    assert obs.read_bytes().count(b"\r") == 0
    assert obs.read_text().splitlines()[0].startswith("t,y,x1")


def test_csv_missing_t_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("y,x1\n1.0,2.0\n")
    with pytest.raises(ValueError, match="'t'"):
        read_observational_csv(path)


def test_observational_table_rejects_nan():
    with pytest.raises(ValueError):
        ObservationalTable(np.array([0, 1]), np.zeros((2, 1)), np.array([0.0, np.nan]))
