import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from diffsketch.cdst import (
    CdstState,
    ConditionDistribution,
    confidence_scores,
    emd,
    fit_condition_distribution,
    load_distribution,
    mardia_test,
    sample_condition,
    save_distribution,
    schedule,
    shapiro_wilk,
    similarity,
)
from diffsketch.cdst.confidence import ALL

from oracles import SHAPIRO_REFERENCE, cosine, emd_bruteforce, mardia_loop, sw_vector

# -- schedule -------------------------------------------------------------------


def test_schedule_examples():
    assert schedule(0, 10) == (1.0, 0.0)
    assert schedule(10, 10) == (0.0, 1.0)
    assert schedule(5, 10) == pytest.approx((0.5, 0.5), abs=1e-15)
    for bad in (-1, 11):
        with pytest.raises(ValueError):
            schedule(bad, 10)
    with pytest.raises(ValueError):
        schedule(0, 0)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 5000), st.data())
def test_schedule_properties(S, data):
    i = data.draw(st.integers(0, S))
    wc, wd = schedule(i, S)
    assert abs(wc + wd - 1.0) <= 1e-12
    assert 0.0 <= wc <= 1.0 and 0.0 <= wd <= 1.0
    if i < S:
        assert schedule(i + 1, S)[0] <= wc


# -- sampling ---------------------------------------------------------------------


def _dist(d=4, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(d, d))
    return ConditionDistribution(rng.normal(size=d), a @ a.T + 0.1 * np.eye(d))


def test_distribution_invariants():
    with pytest.raises(ValueError):
        ConditionDistribution(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        ConditionDistribution(np.zeros(2), -np.eye(2))
    with pytest.raises(ValueError):
        CdstState(np.zeros(3), _dist(4), 10)
    with pytest.raises(ValueError):
        CdstState(np.zeros(4), _dist(4), 0)


def test_sample_condition_endpoints():
    dist = _dist()
    C = np.arange(4.0)
    state = CdstState(C, dist, 100)
    assert np.array_equal(sample_condition(state, 0, 5), C)
    zero = ConditionDistribution(np.array([1.0, -2.0, 3.0, 0.5]), np.zeros((4, 4)))
    assert np.array_equal(sample_condition(CdstState(C, zero, 100), 100, 5), zero.mean)
    a = sample_condition(state, 37, 9)
    assert np.array_equal(a, sample_condition(state, 37, 9))


def test_sample_condition_monte_carlo_mean():
    dist = _dist(3, 1)
    C = np.array([2.0, -1.0, 0.5])
    state = CdstState(C, dist, 100)
    xs = np.array([sample_condition(state, 50, s) for s in range(10_000)])
    target = 0.5 * C + 0.5 * dist.mean
    se = np.sqrt(np.diag(0.25 * dist.covariance) / len(xs))
    assert np.all(np.abs(xs.mean(axis=0) - target) < 3 * se)


def test_fit_constant_samples():
    v = np.array([1.0, 2.0, 3.0])
    d = fit_condition_distribution(np.tile(v, (5, 1)))
    assert np.array_equal(d.mean, v)
    np.testing.assert_allclose(d.covariance, 1e-6 * np.eye(3), atol=1e-20)
    with pytest.raises(ValueError):
        fit_condition_distribution(v[None])


def test_fit_recovers_known_mvn():
    true = _dist(8, 2)
    rng = np.random.default_rng(3)
    x = rng.multivariate_normal(true.mean, true.covariance, size=10_000)
    d = fit_condition_distribution(x)
    assert np.linalg.norm(d.covariance - true.covariance) / np.linalg.norm(true.covariance) < 0.05
    assert np.linalg.norm(d.mean - true.mean) / np.linalg.norm(true.mean) < 0.05


def test_fit_high_dimension_psd():
    x = np.random.default_rng(0).normal(size=(1000, 512))
    d = fit_condition_distribution(x)
    assert np.linalg.eigvalsh(d.covariance).min() >= -1e-8


def test_distribution_roundtrip(tmp_path):
    d = _dist(5)
    h1 = save_distribution(d, tmp_path / "a")
    d2 = load_distribution(tmp_path / "a")
    assert np.array_equal(d.mean, d2.mean) and np.array_equal(d.covariance, d2.covariance)
    assert save_distribution(d2, tmp_path / "b") == h1


# -- normality ---------------------------------------------------------------------


@pytest.mark.parametrize("i,w_ref,p_ref", SHAPIRO_REFERENCE)
def test_shapiro_matches_reference(i, w_ref, p_ref):
    w, p = shapiro_wilk(sw_vector(i))
    assert abs(w - w_ref) < 1e-4
    assert p == pytest.approx(p_ref, rel=1e-3, abs=1e-6)


def test_shapiro_power():
    normal = sum(shapiro_wilk(np.random.default_rng(s).standard_normal(500))[1] > 0.05 for s in range(20))
    uniform = sum(shapiro_wilk(np.random.default_rng(s).uniform(size=500))[1] < 0.05 for s in range(20))
    assert normal >= 18 and uniform >= 18


def test_shapiro_errors():
    with pytest.raises(ValueError):
        shapiro_wilk([1.0, 2.0])
    with pytest.raises(ValueError):
        shapiro_wilk([3.0] * 10)


@pytest.mark.parametrize("seed", range(4))
def test_mardia_matches_double_sum(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_t(5, size=(60 + 10 * seed, 3))
    r = mardia_test(x)
    b1, b2 = mardia_loop(x)
    assert r.skewness == pytest.approx(b1, abs=1e-8)
    assert r.kurtosis == pytest.approx(b2, abs=1e-8)
    n, d = x.shape
    assert r.p_skew == pytest.approx(stats.chi2.sf(n * b1 / 6, d * (d + 1) * (d + 2) / 6), rel=1e-9)
    z = (b2 - d * (d + 2)) / math.sqrt(8 * d * (d + 2) / n)
    assert r.p_kurt == pytest.approx(2 * stats.norm.sf(abs(z)), rel=1e-9)


def test_mardia_decisions():
    keep = sum(not mardia_test(np.random.default_rng(s).standard_normal((2000, 4))).reject for s in range(20))
    reject = sum(mardia_test(np.random.default_rng(s).standard_t(3, size=(2000, 4))).reject for s in range(20))
    assert keep >= 18
    assert reject >= 18


# -- EMD -----------------------------------------------------------------------------


def test_emd_identities():
    a = np.random.default_rng(0).normal(size=(30, 4))
    assert emd(a, a) == 0.0
    assert emd([[0.0, 0.0]], [[3.0, 4.0]]) == pytest.approx(5.0, abs=1e-9)
    with pytest.raises(ValueError):
        emd(np.zeros((0, 2)), a[:, :2])
    with pytest.raises(ValueError):
        emd(a, a[:, :3])


@pytest.mark.parametrize("seed", range(5))
def test_emd_matches_permutation_search(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    assert emd(a, b) == pytest.approx(emd_bruteforce(a, b), abs=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_emd_unequal_sizes_via_replication(seed):
    # 2 vs 3 points: replicating to a common size 6 keeps both uniform measures
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 2)), rng.normal(size=(3, 2))
    ref = emd_bruteforce(np.repeat(a, 3, axis=0), np.repeat(b, 2, axis=0))
    assert emd(a, b) == pytest.approx(ref, abs=1e-9)


def test_emd_symmetry_and_triangle():
    rng = np.random.default_rng(7)
    for _ in range(10):
        a, b, c = (rng.normal(size=(int(rng.integers(3, 9)), 2)) for _ in range(3))
        assert emd(a, b) == pytest.approx(emd(b, a), abs=1e-9)
        assert emd(a, c) <= emd(a, b) + emd(b, c) + 1e-9


# -- confidence ------------------------------------------------------------------------


def _domain(rng, n, d, offset):
    imgs = rng.normal(size=(n, d))
    return imgs, imgs + offset + 0.05 * rng.normal(size=(n, d))


def similarity_loop(x, y):
    (ix, sx), (iy, sy) = x, y
    vals = []
    for p in range(len(ix)):
        for q in range(len(iy)):
            for u, v in ((iy[q] - ix[p], sy[q] - sx[p]), (sx[p] - ix[p], sy[q] - iy[q])):
                if np.linalg.norm(u) > 1e-12 and np.linalg.norm(v) > 1e-12:
                    vals.append(cosine(u, v))
    return sum(vals) / len(vals)


def test_similarity_matches_loop():
    rng = np.random.default_rng(0)
    a, b = _domain(rng, 5, 4, 1.0), _domain(rng, 4, 4, -1.0)
    assert similarity(a, b) == pytest.approx(similarity_loop(a, b), abs=1e-12)
    assert similarity(a, a) == pytest.approx(similarity_loop(a, a), abs=1e-12)


def test_confidence_normalisation_and_identical_domains():
    rng = np.random.default_rng(1)
    a = _domain(rng, 6, 5, 1.0)
    scores = confidence_scores({"A": a, "B": a})
    assert scores[(ALL, ALL)] == pytest.approx(100.0, abs=1e-9)
    assert scores[("A", "B")] == pytest.approx(scores[("A", "A")], abs=1e-12)
