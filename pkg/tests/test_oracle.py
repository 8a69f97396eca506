import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amortized_cate.oracle import (
    DiscreteDgp,
    DiscreteDgpFamily,
    DiscretePpd,
    EnumerationTooLarge,
    InconsistentDataError,
    confounded_pair,
    consistency_experiment,
    exact_cepo_ppd,
    exact_posterior,
    identifiable_family,
    kl_equivalence_check,
    misspecified_truth,
    nonidentifiable_counterexample,
    obs_likelihood,
    random_discrete_family,
)
from amortized_cate.prior import ObservationalTable


def _table(t, x, y):
    return ObservationalTable(np.asarray(t), np.asarray(x, float)[:, None], np.asarray(y, float))


def _coin(p_y1, p_t1=1.0):
    """Trivial U and X; ``P(Y=1) = p_y1`` under both arms."""
    y = np.zeros((2, 1, 1, 2))
    y[:, 0, 0] = [1 - p_y1, p_y1]
    return DiscreteDgp(np.ones(1), np.ones((1, 1)), np.array([[p_t1]]), y)


# ---------------------------------------------------------------------------
# validation


def test_dgp_rejects_bad_rows():
    y = np.zeros((2, 1, 1, 2))
    y[:, 0, 0] = [0.5, 0.6]
    with pytest.raises(ValueError):
        DiscreteDgp(np.ones(1), np.ones((1, 1)), np.array([[0.5]]), y)
    with pytest.raises(ValueError):
        DiscreteDgp(np.ones(5) / 5, np.ones((5, 1)), np.full((5, 1), 0.5), np.full((2, 5, 1, 2), 0.5))


def test_discrete_ppd_validation():
    with pytest.raises(ValueError):
        DiscretePpd(np.array([0.5, 0.5]), np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        DiscretePpd(np.array([0.0, 1.0]), np.array([0.5, 0.6]))


def test_family_size_cap():
    with pytest.raises(ValueError):
        DiscreteDgpFamily.uniform([_coin(0.5)] * 65)


# ---------------------------------------------------------------------------
# likelihood


def test_likelihood_empty_table():
    assert obs_likelihood(_coin(0.3), None) == 0.0


def test_likelihood_deterministic_row():
    assert obs_likelihood(_coin(1.0), _table([1], [0], [1])) == 0.0


def test_likelihood_out_of_support():
    with pytest.raises(ValueError):
        obs_likelihood(_coin(0.3), _table([1], [0], [2]))
    with pytest.raises(ValueError):
        obs_likelihood(_coin(0.3), _table([1], [1], [1]))


def test_likelihood_two_rows_by_hand():
    dgp = random_discrete_family(7, n_members=1, n_x=2, n_u=2, n_y=2).members[0]
    rows = [(1, 0, 1), (0, 1, 0)]  # (t, x, y)

    def p_row(t, x, y):
        total = 0.0
        for u in range(2):
            pt = dgp.p_t_xu[u, x] if t == 1 else 1 - dgp.p_t_xu[u, x]
            total += dgp.p_u[u] * dgp.p_x_u[u, x] * pt * dgp.p_y_txu[t, u, x, y]
        return total

    expected = sum(math.log(p_row(*r)) for r in rows)
    got = obs_likelihood(dgp, _table([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows]))
    assert got == pytest.approx(expected, abs=1e-13)


# ---------------------------------------------------------------------------
# posterior


def test_posterior_empty_table_is_prior():
    fam = random_discrete_family(1)
    assert np.array_equal(exact_posterior(fam, None), fam.prior)


def test_posterior_equivalent_laws_keep_prior():
    fam = DiscreteDgpFamily([_coin(0.4), _coin(0.4)], np.array([0.3, 0.7]))
    data = _coin(0.4).sample(50, np.random.default_rng(0))
    np.testing.assert_allclose(exact_posterior(fam, data), [0.3, 0.7], atol=1e-15)


def test_posterior_one_step_bayes():
    fam = DiscreteDgpFamily.uniform([_coin(0.9), _coin(0.1)])
    np.testing.assert_allclose(exact_posterior(fam, _table([1], [0], [1])), [0.9, 0.1], atol=1e-15)


def test_posterior_inconsistent_data():
    fam = DiscreteDgpFamily.uniform([_coin(1.0), _coin(1.0)])
    with pytest.raises(InconsistentDataError):
        exact_posterior(fam, _table([1], [0], [0]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 40))
def test_posterior_normalized_and_order_free(seed, n):
    fam = random_discrete_family(seed)
    rng = np.random.default_rng(seed)
    data = fam.members[0].sample(n, rng)
    w = exact_posterior(fam, data)
    assert abs(w.sum() - 1.0) < 1e-12
    perm = rng.permutation(n)
    np.testing.assert_allclose(exact_posterior(fam, data.subset(perm)), w, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(0.05, 0.95))
def test_equivalent_pair_ratio_preserved(seed, a):
    base = random_discrete_family(seed, n_members=2)
    twin = base.members[0]
    fam = DiscreteDgpFamily((twin, twin, base.members[1]), np.array([a, 1 - a, 1.0]) / 2)
    w = exact_posterior(fam, base.members[1].sample(20, np.random.default_rng(seed)))
    assert w[0] / w[1] == pytest.approx(a / (1 - a), rel=1e-12)


# ---------------------------------------------------------------------------
# CEPO posterior-predictive


def test_single_member_point_mass():
    fam = random_discrete_family(2, n_members=1)
    ppd = exact_cepo_ppd(fam, None, 1, 1)
    assert ppd.probs.tolist() == [1.0]
    assert ppd.atoms[0] == pytest.approx(fam.members[0].cepo()[1, 1], abs=1e-15)


def test_equal_cepos_merge():
    fam = DiscreteDgpFamily.uniform([_coin(0.3, p_t1=0.2), _coin(0.3, p_t1=0.8)])
    ppd = exact_cepo_ppd(fam, None, 0, 1)
    assert len(ppd.atoms) == 1 and ppd.probs[0] == 1.0


def test_confounded_pair_ppd():
    fam = confounded_pair()
    for n in (0, 10, 200):
        data = None if n == 0 else fam.members[n % 2].sample(n, np.random.default_rng(n))
        ppd = exact_cepo_ppd(fam, data, 0, 1)
        assert ppd.atoms.tolist() == [0.5, 1.0]
        assert ppd.probs.tolist() == [0.5, 0.5]


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_pushforward_mean_identity(seed):
    fam = random_discrete_family(seed, n_members=5)
    data = fam.members[1].sample(15, np.random.default_rng(seed))
    w = exact_posterior(fam, data)
    for x in range(2):
        for t in (0, 1):
            ppd = exact_cepo_ppd(fam, data, x, t)
            assert ppd.mean == pytest.approx(float(w @ fam.cepos()[:, t, x]), abs=1e-13)


# ---------------------------------------------------------------------------
# consistency


def test_identifiable_family_is_consistent():
    fam = identifiable_family()
    res = consistency_experiment(fam, fam.members[13], n_seeds=20, seed=0)
    assert res.nonincreasing
    assert res.mean_abs_error[-1] < 0.02
    assert res.consistent


def test_misspecified_truth_plateaus():
    res = consistency_experiment(identifiable_family(), misspecified_truth(), n_seeds=5, seed=0)
    assert res.mean_abs_error[-1] > 0.02
    assert not res.consistent


def test_counterexample_exact():
    fam, report = nonidentifiable_counterexample()
    assert report["posterior_equals_prior"]
    assert report["posterior_mean_mu1"] == [0.75]
    assert report["posterior_mean_cate"] == [0.5]
    assert not report["consistent"]
    joints = [m.obs_joint() for m in fam.members]
    assert np.array_equal(joints[0], joints[1])
    assert {r["true_cate"] for r in report["rows"]} == {0.0, 1.0}


# ---------------------------------------------------------------------------
# KL equivalence


@pytest.mark.parametrize("seed", range(3))
def test_kl_equivalence_random_families(seed):
    res = kl_equivalence_check(random_discrete_family(seed), n=2, n_thetas=10, seed=seed)
    assert res.max_dev < 1e-8
    assert res.argmin_match


def test_kl_minimum_at_exact_ppd():
    res = kl_equivalence_check(random_discrete_family(4), n=3)
    assert abs(res.loss_kl[-1]) < 1e-12
    assert res.loss_t[-1] == pytest.approx(res.constant, abs=1e-9)
    assert np.argmin(res.loss_t) == len(res.loss_t) - 1


def test_kl_enumeration_cap():
    fam = random_discrete_family(0, n_members=8, n_x=4, n_u=2, n_y=4)
    with pytest.raises(EnumerationTooLarge):
        kl_equivalence_check(fam, n=6)
