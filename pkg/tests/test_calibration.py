import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amortized_cate.calibration import (
    DEFAULT_LEVELS,
    DEFAULT_TEMPERATURES,
    CoverageCurve,
    FoldPredictions,
    cate_coverage,
    cate_coverage_from_arms,
    coverage_matrix,
    fold_predictions,
    ice,
    interval_widths,
    regression_coverage,
    search_temperature,
    search_temperature_folds,
    tune_temperature,
)
from amortized_cate.inference import sample_histograms, uniform_draws
from amortized_cate.model import ModelConfig, ModelState, PpdBatch
from amortized_cate.prior import SinusoidalPrior

SMALL = ModelConfig(n_layers=1, d_model=16, n_heads=2, n_bins=16, max_features=12, ffn_hidden=16)
EDGES = np.linspace(-6, 6, 49)
CENTERS = 0.5 * (EDGES[:-1] + EDGES[1:])


def _gaussian_ppds(n, sd, loc=0.0):
    logits = -0.5 * ((CENTERS - loc) / sd) ** 2
    return PpdBatch(np.tile(EDGES, (n, 1)), np.tile(logits, (n, 1)))


def _fold(ppds, y, seed, fold=0, n_samples=2000):
    ub, up = uniform_draws(seed, len(y), n_samples, stream=100 + fold)
    return FoldPredictions(fold, np.arange(len(y)), np.asarray(y, float), ppds, ub, up)


def _self_consistent_folds(sd_model, sd_truth, n=400, k=3):
    """Folds whose outcomes are drawn from a Gaussian with ``sd_truth``; the model predicts ``sd_model``."""
    folds = []
    for f in range(k):
        y = np.random.default_rng(f).normal(0, sd_truth, n)
        folds.append(_fold(_gaussian_ppds(n, sd_model), y, seed=f, fold=f))
    return folds


# ---------------------------------------------------------------------------
# ICE


def test_ice_calibrated_curve_is_zero():
    assert ice(CoverageCurve(DEFAULT_LEVELS, DEFAULT_LEVELS, "cate")) == pytest.approx(0.0, abs=1e-12)


def test_ice_full_coverage():
    assert ice(CoverageCurve(DEFAULT_LEVELS, np.ones(19), "cate")) == pytest.approx(0.5, abs=1e-12)


def test_ice_zero_coverage():
    assert ice(CoverageCurve(DEFAULT_LEVELS, np.zeros(19), "cate")) == pytest.approx(-0.5, abs=1e-12)


def test_ice_needs_two_points():
    with pytest.raises(ValueError):
        ice(CoverageCurve([0.5], [0.5], "cate"))


@given(cov=st.lists(st.floats(0, 1), min_size=19, max_size=19))
def test_ice_bounded(cov):
    assert abs(ice(CoverageCurve(DEFAULT_LEVELS, cov, "regression"))) <= 0.5 + 1e-12


def test_coverage_curve_validation():
    with pytest.raises(ValueError):
        CoverageCurve([0.5, 0.4], [0.5, 0.5], "cate")
    with pytest.raises(ValueError):
        CoverageCurve([0.4, 0.5], [0.5, 1.5], "cate")
    with pytest.raises(ValueError):
        CoverageCurve([0.4, 0.5], [0.5, 0.5], "other")


# ---------------------------------------------------------------------------
# coverage


def test_point_mass_draws_cover_everything():
    y = np.random.default_rng(0).normal(size=7)
    draws = np.repeat(y[:, None], 50, axis=1)
    assert coverage_matrix(draws, y, DEFAULT_LEVELS).all()


def test_uniform_ppd_coverage_matches_level():
    """Outcomes spread evenly over the support of a uniform histogram are covered at the nominal rate."""
    n = 2000
    ppds = PpdBatch(np.tile(np.linspace(0, 1, 11), (n, 1)), np.zeros((n, 10)))
    y = (np.arange(n) + 0.5) / n
    hits = _fold(ppds, y, seed=1, n_samples=4000).coverage(DEFAULT_LEVELS, 1.0)
    np.testing.assert_allclose(hits.mean(axis=0), DEFAULT_LEVELS, atol=0.02)


def test_coverage_nondecreasing_in_level():
    f = _self_consistent_folds(1.0, 1.5, n=200, k=1)[0]
    hits = f.coverage(DEFAULT_LEVELS, 1.0)
    assert np.all(np.diff(hits.astype(int), axis=1) >= 0)


def test_cate_coverage_symmetric_identical_arms():
    p = _gaussian_ppds(300, 1.0)
    curve = cate_coverage_from_arms(p, p, np.zeros(300))
    assert np.all(curve.coverage[-5:] > 0.95)
    assert curve.coverage[0] > 0.03


def test_cate_coverage_zero_width_wrong_value():
    tight = np.full(48, -1e300)
    tight[24] = 0.0
    p = PpdBatch(np.tile(EDGES, (50, 1)), np.tile(tight, (50, 1)))
    curve = cate_coverage_from_arms(p, p, np.full(50, 5.0))
    assert np.all(curve.coverage == 0.0)


def test_regression_and_cate_coverage_on_model():
    inst = SinusoidalPrior((0.0, 0.0))(3, 60)
    state = ModelState.init(SMALL, 0)
    reg = regression_coverage(state, inst.observational(), k_folds=3, n_samples=200)
    assert reg.kind == "regression" and len(reg.coverage) == 19
    cat = cate_coverage(state, inst, n_samples=200)
    assert cat.kind == "cate"


def test_fold_predictions_reject_bad_folds():
    table = SinusoidalPrior((0.0, 0.0))(4, 60).observational()
    with pytest.raises(ValueError):
        fold_predictions(ModelState.init(SMALL, 0), table, k_folds=1)
    with pytest.raises(ValueError):
        fold_predictions(ModelState.init(SMALL, 0), table.subset(np.arange(5)), k_folds=3)


# ---------------------------------------------------------------------------
# temperature


def test_widths_nondecreasing_in_temperature():
    # interior unimodal histograms; near the support edge, truncation can shrink wide intervals
    g = np.random.default_rng(0)
    loc, sd = g.uniform(-1, 1, (20, 1)), g.uniform(0.2, 1.5, (20, 1))
    ppds = PpdBatch(np.tile(EDGES, (20, 1)), -0.5 * ((CENTERS - loc) / sd) ** 2)
    for alpha in (0.05, 0.5):
        w = interval_widths(ppds, DEFAULT_TEMPERATURES, alpha, n_samples=2000)
        assert np.all(np.diff(w, axis=0) >= -1e-12)


def test_tuning_keeps_calibrated_model():
    folds = _self_consistent_folds(1.0, 1.0)
    res = search_temperature_folds(folds, grid=[0.25, 1.0, 4.0])
    assert res.theta_T == 1.0


def test_tuning_one_element_grid():
    assert search_temperature_folds(_self_consistent_folds(1.0, 3.0), grid=[0.7]).theta_T == 0.7


def test_tuning_overconfident_widens():
    folds = _self_consistent_folds(0.5, 1.5)
    res = search_temperature_folds(folds)
    assert res.ice_before < -0.1
    assert res.theta_T > 1.0
    assert abs(res.ice_after) < abs(res.ice_before)


def test_tuning_underconfident_sharpens():
    res = search_temperature_folds(_self_consistent_folds(2.0, 0.7))
    assert res.ice_before > 0.1 and res.theta_T < 1.0


def test_ties_go_to_larger_temperature():
    # every outcome sits at the center; coverage is 1 at any temperature
    folds = [_fold(_gaussian_ppds(50, 1e-3), np.full(50, CENTERS[24]), seed=0)]
    res = search_temperature_folds(folds, grid=[0.5, 1.0, 2.0])
    assert np.ptp(res.ice_by_temperature) == 0.0
    assert res.theta_T == 2.0


def test_tuning_rejects_bad_grid():
    with pytest.raises(ValueError):
        search_temperature_folds(_self_consistent_folds(1.0, 1.0, k=1), grid=[1.0, -2.0])


def test_tune_temperature_end_to_end():
    inst = SinusoidalPrior((0.0, 0.0))(5, 60)
    state = ModelState.init(SMALL, 1)
    res = search_temperature(state, inst.observational(), grid=[0.5, 1.0, 2.0], k_folds=3, n_samples=200)
    assert res.theta_T in (0.5, 1.0, 2.0)
    assert res.fold_ice.shape == (3, 3)
    assert tune_temperature(state, inst.observational(), grid=[0.5, 1.0, 2.0], k_folds=3,
                            n_samples=200) == res.theta_T


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), T=st.floats(0.3, 5))
def test_temperature_draws_share_uniforms(seed, T):
    """Re-tempering changes only the histogram, never the variates."""
    p = _gaussian_ppds(5, 1.0)
    ub, up = uniform_draws(seed, 5, 100)
    hot = p.with_temperature(T)
    a = sample_histograms(hot.probs, hot.edges, ub, up)
    f = _fold(p, np.zeros(5), seed)
    f.u_bin, f.u_pos = ub, up
    lo_hi = coverage_matrix(a, np.zeros(5), DEFAULT_LEVELS)
    assert np.array_equal(f.coverage(DEFAULT_LEVELS, T), lo_hi)
