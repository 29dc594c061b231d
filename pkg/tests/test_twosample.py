import math

import numpy as np
import pytest

from numpy.testing import assert_allclose
from scipy import stats

from kernelrct import twosample
from kernelrct.twosample import GaussianKernel, LinearKernel, Sample, TestResult


def _normal(n, d, shift=0.0, seed=0):
    return np.random.default_rng(seed).normal(size=(n, d)) + shift


@pytest.fixture
def arms():
    return Sample("T", _normal(25, 3, 0.0, seed=1)), Sample("C", _normal(30, 3, 0.0, seed=2))


@pytest.fixture
def shifted():
    return Sample("T", _normal(30, 3, 1.5, seed=3)), Sample("C", _normal(30, 3, 0.0, seed=4))


def test_linear_mmd_closed_form(arms):
    xt, xc = arms
    diff = xt.features.mean(axis=0) - xc.features.mean(axis=0)
    expected = (diff @ diff
                - np.trace(np.cov(xt.features, rowvar=False)) / xt.size
                - np.trace(np.cov(xc.features, rowvar=False)) / xc.size)
    assert twosample.mmd_unbiased(xt, xc) == pytest.approx(expected, rel=1e-10, abs=1e-12)


def test_mmd_swap_symmetry(arms):
    xt, xc = arms
    kernel = GaussianKernel(1.3)
    assert twosample.mmd_unbiased(xt, xc, kernel) == pytest.approx(twosample.mmd_unbiased(xc, xt, kernel), rel=1e-12)


def test_mmd_with_item_kernel_matches_features(arms):
    xt, xc = arms
    kernel = GaussianKernel(2.0)
    items_t = Sample("T", items=list(xt.features), kernel=lambda a, b: kernel(a, b))
    items_c = Sample("C", items=list(xc.features), kernel=lambda a, b: kernel(a, b))
    assert twosample.mmd_unbiased(items_t, items_c) == pytest.approx(twosample.mmd_unbiased(xt, xc, kernel), rel=1e-10)


def test_identical_arms_not_rejected():
    x = _normal(20, 2, seed=5)
    result = twosample.mmd_permutation_test(Sample("T", x), Sample("C", x), n_perm=200, rng_seed=1)
    assert not result.reject
    assert result.method == twosample.MMD_PERMUTATION


def test_shifted_arms_rejected(shifted):
    result = twosample.mmd_permutation_test(*shifted, alpha=0.05, n_perm=500, rng_seed=3)
    assert result.reject
    assert result.p_value == pytest.approx(1 / 501)
    assert result.statistic > result.threshold


def test_permutation_test_is_seeded(arms):
    a = twosample.mmd_permutation_test(*arms, n_perm=200, rng_seed=9)
    b = twosample.mmd_permutation_test(*arms, n_perm=200, rng_seed=9)
    assert a == b
    assert 1 / 201 <= a.p_value <= 1


def test_permutation_count_and_alpha_checked(arms):
    with pytest.raises(ValueError):
        twosample.mmd_permutation_test(*arms, n_perm=50)
    with pytest.raises(ValueError):
        twosample.mmd_permutation_test(*arms, alpha=1.0)


def test_sample_checks():
    with pytest.raises(twosample.SampleError):
        twosample.mmd_unbiased(Sample("T", [[1.0, 2.0]]), Sample("C", _normal(5, 2)))
    with pytest.raises(twosample.SampleError):
        twosample.mmd_unbiased(Sample("T", _normal(5, 3)), Sample("C", _normal(5, 2)))
    with pytest.raises(twosample.SampleError):
        Sample("T")
    with pytest.raises(twosample.SampleError):
        Sample("T", items=[1, 2, 3])


def test_one_dimensional_features_become_columns():
    s = Sample("T", [1.0, 2.0, 3.0])
    assert s.features.shape == (3, 1)
    assert s.dim == 1


def test_hotelling_matches_direct_formula(shifted):
    xt, xc = shifted
    n_t, n_c, p = xt.size, xc.size, 3
    s = ((n_t - 1) * np.cov(xt.features, rowvar=False) + (n_c - 1) * np.cov(xc.features, rowvar=False)) / (n_t + n_c - 2)
    diff = xt.features.mean(axis=0) - xc.features.mean(axis=0)
    t2 = n_t * n_c / (n_t + n_c) * diff @ np.linalg.solve(s, diff)
    f = (n_t + n_c - p - 1) / ((n_t + n_c - 2) * p) * t2
    h = twosample.hotelling_t2(xt, xc)
    assert h.t2 == pytest.approx(t2, rel=1e-10)
    assert h.f_stat == pytest.approx(f, rel=1e-10)
    assert (h.dof1, h.dof2) == (3, n_t + n_c - 4)
    assert h.p_value == pytest.approx(stats.f.sf(f, 3, n_t + n_c - 4), rel=1e-8, abs=1e-300)
    assert_allclose(twosample.pooled_covariance(xt, xc), s, rtol=1e-12)


def test_hotelling_test_result(arms, shifted):
    result = twosample.hotelling_test(*shifted)
    assert result.method == twosample.HOTELLING_F
    assert result.reject and result.p_value < 0.05
    assert result.threshold == pytest.approx(stats.f.ppf(0.95, 3, 56), rel=1e-9)
    assert result.details["t2"] > 0
    null = twosample.hotelling_test(*arms)
    assert null.reject == (null.p_value < 0.05)


def test_hotelling_singular_covariance():
    x = _normal(10, 2, seed=6)
    y = _normal(10, 2, seed=7)
    xt = Sample("T", np.column_stack([x, x[:, 0]]))
    xc = Sample("C", np.column_stack([y, y[:, 0]]))
    with pytest.raises(twosample.SingularCovarianceError):
        twosample.hotelling_t2(xt, xc)


def test_hotelling_needs_enough_subjects():
    with pytest.raises(twosample.SampleError):
        twosample.hotelling_t2(Sample("T", _normal(2, 6)), Sample("C", _normal(3, 6)))


def test_kernel_hotelling_standard_weights_reduce_to_hotelling(shifted):
    xt, xc = shifted
    terms = twosample.kernel_hotelling_terms(xt, xc, gamma=0.0, weights=twosample.STANDARD_WEIGHTS)
    s = twosample.pooled_covariance(xt, xc)
    diff = xt.features.mean(axis=0) - xc.features.mean(axis=0)
    assert terms.quadratic == pytest.approx(diff @ np.linalg.solve(s, diff), rel=1e-10)
    assert terms.d1 == pytest.approx(3.0)
    assert terms.d2 == pytest.approx(3.0)
    assert terms.statistic == pytest.approx((terms.quadratic - 3.0) / math.sqrt(6.0))


def test_kernel_hotelling_printed_weights_and_regularization(shifted):
    xt, xc = shifted
    printed = twosample.kernel_hotelling(xt, xc, gamma=0.0)
    standard = twosample.kernel_hotelling(xt, xc, gamma=0.0, weights=twosample.STANDARD_WEIGHTS)
    assert printed != pytest.approx(standard)
    ridge = twosample.kernel_hotelling_terms(xt, xc, gamma=10.0)
    assert 0 < ridge.d2 < ridge.d1 < 3.0
    with pytest.raises(ValueError):
        twosample.kernel_hotelling(xt, xc, gamma=-1.0)
    with pytest.raises(ValueError):
        twosample.kernel_hotelling(xt, xc, weights="other")


def test_kernel_hotelling_singular_needs_regularization():
    x = _normal(8, 2, seed=8)
    xt = Sample("T", np.column_stack([x, 2 * x[:, 1]]))
    y = _normal(8, 2, seed=9)
    xc = Sample("C", np.column_stack([y, 2 * y[:, 1]]))
    with pytest.raises(twosample.SingularCovarianceError):
        twosample.kernel_hotelling(xt, xc)
    assert math.isfinite(twosample.kernel_hotelling(xt, xc, gamma=0.1))


def test_kernel_hotelling_test(shifted, arms):
    result = twosample.kernel_hotelling_test(*shifted, gamma=0.0, n_perm=300, rng_seed=2)
    assert result.method == twosample.KERNEL_HOTELLING
    assert result.reject
    assert result.details == {"gamma": 0.0, "pooled_weights": twosample.PRINTED_WEIGHTS}
    null = twosample.kernel_hotelling_test(*arms, n_perm=300, rng_seed=2)
    assert null.reject == (null.statistic > null.threshold)


def test_gaussian_kernel_and_median_heuristic():
    x = _normal(6, 2, seed=10)
    kernel = GaussianKernel(twosample.median_heuristic(x))
    gram = twosample.gram_matrix(list(x), kernel)
    for i in range(6):
        for j in range(6):
            assert gram[i, j] == pytest.approx(kernel(x[i], x[j]))
    assert_allclose(np.diag(gram), 1.0)
    assert twosample.median_heuristic(np.ones((4, 2))) == 1.0
    assert twosample.gram_matrix([[1.0, 2.0], [3.0, 4.0]], LinearKernel())[0, 1] == 11.0


def test_test_result_invariants():
    with pytest.raises(ValueError):
        TestResult("x", 2.0, 1.0, 0.5, False, 3, 3, 0.05)
    with pytest.raises(ValueError):
        TestResult("x", 2.0, 1.0, 1.5, True, 3, 3, 0.05)
    doc = TestResult("x", 2.0, 1.0, 0.01, True, 3, 4, 0.05, dof=(6, 10), details={"t2": 5.0}).to_json()
    assert doc["dof"] == [6, 10] and doc["t2"] == 5.0 and doc["n_C"] == 4


@pytest.mark.slow
def test_hotelling_is_calibrated_under_the_null():
    rejections = 0
    reps = 2000
    for r in range(reps):
        xt = Sample("T", _normal(15, 6, seed=2 * r))
        xc = Sample("C", _normal(15, 6, seed=2 * r + 1))
        rejections += twosample.hotelling_test(xt, xc).reject
    assert abs(rejections / reps - 0.05) < 3 * math.sqrt(0.05 * 0.95 / reps)


def test_mmd_hand_example():
    xt, xc = Sample("T", [0.0, 2.0]), Sample("C", [1.0, 3.0])
    assert twosample.mmd_unbiased(xt, xc, LinearKernel()) == pytest.approx(-1.0, abs=1e-12)


def test_mmd_constant_kernel_is_zero(arms):
    assert twosample.mmd_unbiased(*arms, lambda a, b: 2.5) == 0.0


def test_hotelling_one_dimensional_hand_example():
    h = twosample.hotelling_t2(Sample("T", [0.0, 1.0]), Sample("C", [2.0, 3.0]))
    assert h.t2 == pytest.approx(8.0, rel=1e-12)
    t = stats.ttest_ind([0.0, 1.0], [2.0, 3.0]).statistic
    assert h.t2 == pytest.approx(t ** 2, rel=1e-12)
    assert (h.dof1, h.dof2) == (1, 2)


def test_hotelling_equal_means():
    x = _normal(12, 2, seed=11)
    h = twosample.hotelling_t2(Sample("T", x), Sample("C", x[::-1]))
    assert h.t2 == pytest.approx(0.0, abs=1e-20)
    assert h.p_value == pytest.approx(1.0)


def test_hotelling_affine_invariance(shifted):
    xt, xc = shifted
    rng = np.random.default_rng(12)
    a = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    b = rng.normal(size=3)
    moved = twosample.hotelling_t2(Sample("T", xt.features @ a.T + b), Sample("C", xc.features @ a.T + b))
    assert moved.t2 == pytest.approx(twosample.hotelling_t2(xt, xc).t2, rel=1e-8)


def test_kernel_hotelling_terms_shrink_with_gamma(shifted):
    terms = [twosample.kernel_hotelling_terms(*shifted, gamma=g) for g in (0.0, 0.01, 0.1, 1.0, 10.0, 100.0)]
    d1 = [t.d1 for t in terms]
    d2 = [t.d2 for t in terms]
    assert all(a >= b for a, b in zip(d1, d1[1:]))
    assert all(a >= b for a, b in zip(d2, d2[1:]))
    assert d1[-1] < 0.1 * d1[0]


def test_permuted_statistic_matches_recomputation(arms):
    xt, xc = arms
    kernel = GaussianKernel(1.7)
    pooled = np.vstack([xt.features, xc.features])
    gram = twosample.joint_gram(xt, xc, kernel)
    n_t = xt.size
    for perm in twosample.permutations(pooled.shape[0], 10, 5):
        fast = twosample._mmd_from_gram(gram, perm[:n_t], perm[n_t:])
        direct = twosample.mmd_unbiased(Sample("T", pooled[perm[:n_t]]), Sample("C", pooled[perm[n_t:]]), kernel)
        assert fast == direct


@pytest.mark.parametrize("alpha, n_perm, expected", [
    (0.05, 199, 10), (0.05, 1000, 50), (0.1, 100, 10), (0.001, 100, 0), (0.5, 101, 51),
])
def test_critical_rank(alpha, n_perm, expected):
    assert twosample.critical_rank(alpha, n_perm) == expected


def test_threshold_is_consistent_with_p_value_at_the_boundary():
    null = np.arange(199, dtype=float)
    at_level = twosample._permutation_result(twosample.MMD_PERMUTATION, 189.5, null, 5, 5, 0.05, 199, 0)
    assert at_level.p_value == 0.05
    assert at_level.reject
    above = twosample._permutation_result(twosample.MMD_PERMUTATION, 189.0, null, 5, 5, 0.05, 199, 0)
    assert above.p_value == 11 / 200
    assert not above.reject
    unreachable = twosample._permutation_result(twosample.MMD_PERMUTATION, 1e6, null, 5, 5, 0.001, 199, 0)
    assert unreachable.threshold == math.inf
    assert not unreachable.reject


@pytest.mark.parametrize("alpha", [0.01, 0.05, 0.1])
def test_reject_agrees_with_p_value(alpha):
    for seed in range(20):
        xt = Sample("T", _normal(8, 2, 0.6, seed=100 + seed))
        xc = Sample("C", _normal(8, 2, 0.0, seed=200 + seed))
        mmd = twosample.mmd_permutation_test(xt, xc, alpha=alpha, n_perm=199, rng_seed=seed)
        assert mmd.reject == (mmd.p_value <= alpha)
        kh = twosample.kernel_hotelling_test(xt, xc, gamma=0.1, alpha=alpha, n_perm=199, rng_seed=seed)
        assert kh.reject == (kh.p_value <= alpha)


@pytest.mark.slow
def test_mmd_permutation_p_values_are_super_uniform():
    reps = 5000
    p = np.empty(reps)
    for r in range(reps):
        x = _normal(8, 2, seed=3 * r)
        y = _normal(8, 2, seed=3 * r + 1)
        kernel = GaussianKernel(twosample.median_heuristic(np.vstack([x, y])))
        p[r] = twosample.mmd_permutation_test(Sample("T", x), Sample("C", y), n_perm=199,
                                              rng_seed=3 * r + 2, kernel=kernel).p_value
    for u in (0.01, 0.05, 0.1):
        assert np.mean(p <= u) <= u + 0.01
    assert 0.035 <= np.mean(p <= 0.05) <= 0.065


@pytest.mark.slow
def test_hotelling_f_statistic_follows_f_distribution():
    f_stats = [twosample.hotelling_t2(Sample("T", _normal(20, 3, seed=2 * r + 50000)),
                                      Sample("C", _normal(20, 3, seed=2 * r + 50001))).f_stat
               for r in range(5000)]
    assert stats.kstest(f_stats, stats.f(3, 36).cdf).statistic < 0.025


@pytest.mark.slow
@pytest.mark.parametrize("kernel", [LinearKernel(), GaussianKernel(1.5)])
def test_mmd_is_unbiased_under_the_null(kernel):
    values = np.array([twosample.mmd_unbiased(Sample("T", _normal(10, 3, seed=2 * r + 70000)),
                                              Sample("C", _normal(12, 3, seed=2 * r + 70001)), kernel)
                       for r in range(2000)])
    se = values.std(ddof=1) / math.sqrt(values.size)
    assert abs(values.mean()) < 4 * se
