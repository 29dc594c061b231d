import math

import numpy as np
import pytest

from numpy.testing import assert_allclose
from scipy import stats

from kernelrct import gpmodel
from kernelrct.gpmodel import FitConfig, FitResult, GpParams, ObservationGrid, Trajectory


THETA = GpParams(mu=-0.3, sigma2=0.5, alpha2=1.2, beta=0.4, rho2=8.0, nu=1.5)


@pytest.fixture
def grid():
    return ObservationGrid.unit(np.arange(1, 9))


@pytest.fixture
def cohort(grid):
    return gpmodel.simulate(THETA, grid, 40, rng_seed=7)


def test_covariance_by_hand():
    params = GpParams(mu=0, sigma2=0, alpha2=1, beta=0, rho2=1, nu=2)
    cov = gpmodel.build_covariance(params, ObservationGrid.unit([1, 2]))
    assert_allclose(cov, [[1, math.exp(-0.5)], [math.exp(-0.5), 1]])


def test_covariance_single_point():
    params = GpParams(mu=0, sigma2=0.3, alpha2=2.0, beta=0.5, rho2=1, nu=1)
    cov = gpmodel.build_covariance(params, ObservationGrid.unit([1]))
    assert cov.shape == (1, 1)
    assert cov[0, 0] == pytest.approx(2.3)


def test_covariance_without_process_is_noise_over_counts():
    grid = ObservationGrid([1, 2], counts=[2, 4], pair_counts=[[2, 1], [1, 4]])
    params = GpParams(mu=0, sigma2=0.8, alpha2=0, beta=1, rho2=3, nu=1)
    assert_allclose(gpmodel.build_covariance(params, grid), np.diag([0.4, 0.2]))


def test_covariance_is_symmetric_and_scaled_by_pair_counts():
    grid = ObservationGrid([1, 3, 4], counts=[4, 2, 3], pair_counts=[[4, 1, 2], [1, 2, 0], [2, 0, 3]])
    cov = gpmodel.build_covariance(THETA, grid)
    assert_allclose(cov, cov.T)
    assert cov[1, 2] == 0.0
    unit = gpmodel.build_covariance(THETA, ObservationGrid.unit([1, 3, 4]))
    assert cov[0, 1] == pytest.approx(unit[0, 1] * 1 / (4 * 2))


def test_degenerate_covariance_raises():
    params = GpParams(mu=0, sigma2=0, alpha2=0, beta=0, rho2=1, nu=1)
    with pytest.raises(gpmodel.CovarianceError) as info:
        gpmodel.build_covariance(params, ObservationGrid.unit([1, 2, 3]))
    assert info.value.smallest_eigenvalue == pytest.approx(0.0)


@pytest.mark.parametrize("mu, times, expected", [
    (0.0, [1, 2, 3], [0, 0, 0]),
    (-0.5, [1, 2, 3], [-0.5, -1.0, -1.5]),
    (1.0, [10], [10]),
])
def test_mean_vector(mu, times, expected):
    assert_allclose(gpmodel.mean_vector(THETA.replace(mu=mu), ObservationGrid.unit(times)), expected)


def test_log_likelihood_standard_normal_at_mode():
    params = GpParams(mu=0, sigma2=1, alpha2=0, beta=0, rho2=1, nu=1)
    assert gpmodel.log_likelihood(params, ObservationGrid.unit([1]), [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_log_likelihood_at_mean(grid):
    cov = gpmodel.build_covariance(THETA, grid)
    expected = -0.5 * grid.size * math.log(2 * math.pi) - 0.5 * np.linalg.slogdet(cov)[1]
    assert gpmodel.log_likelihood(THETA, grid, gpmodel.mean_vector(THETA, grid)) == pytest.approx(expected)


def test_log_likelihood_matches_scipy(grid):
    x = np.random.default_rng(3).normal(size=grid.size)
    cov = gpmodel.build_covariance(THETA, grid)
    expected = stats.multivariate_normal(gpmodel.mean_vector(THETA, grid), cov).logpdf(x)
    assert gpmodel.log_likelihood(THETA, grid, x) == pytest.approx(expected, rel=1e-10)


def test_missing_values_are_marginalized(grid):
    x = np.random.default_rng(4).normal(size=grid.size)
    x[[1, 4, 5]] = np.nan
    keep = ~np.isnan(x)
    cov = gpmodel.build_covariance(THETA, grid)[np.ix_(keep, keep)]
    mean = gpmodel.mean_vector(THETA, grid)[keep]
    expected = stats.multivariate_normal(mean, cov).logpdf(x[keep])
    assert gpmodel.log_likelihood(THETA, grid, Trajectory("a", x)) == pytest.approx(expected, rel=1e-10)


def test_total_log_likelihood_is_sum(grid, cohort):
    total = gpmodel.total_log_likelihood(THETA, grid, cohort)
    assert total == pytest.approx(sum(gpmodel.log_likelihood(THETA, grid, traj) for traj in cohort))


def test_simulate_is_deterministic(grid):
    a = gpmodel.simulate(THETA, grid, 12, rng_seed=11, prefix="X")
    b = gpmodel.simulate(THETA, grid, 12, rng_seed=11, prefix="X")
    assert [t.subject_id for t in a] == [f"X{i:02d}" for i in range(12)]
    assert all(np.array_equal(s.values, t.values) for s, t in zip(a, b))
    c = gpmodel.simulate(THETA, grid, 12, rng_seed=12, prefix="X")
    assert not np.array_equal(a[0].values, c[0].values)


def test_simulate_moments(grid):
    draws = np.vstack([t.values for t in gpmodel.simulate(THETA, grid, 20000, rng_seed=5)])
    assert_allclose(draws.mean(axis=0), gpmodel.mean_vector(THETA, grid), atol=0.1)
    assert_allclose(np.cov(draws, rowvar=False), gpmodel.build_covariance(THETA, grid), atol=0.15)


def test_score_matches_numerical_gradient(grid, cohort):
    x = cohort[0]
    analytic = gpmodel.score(THETA, grid, x)
    theta = THETA.as_array()
    for j in range(theta.size):
        h = 1e-4 * (1 + abs(theta[j]))
        up, down = theta.copy(), theta.copy()
        up[j] += h
        down[j] -= h
        numeric = (gpmodel.log_likelihood(GpParams.from_array(up), grid, x)
                   - gpmodel.log_likelihood(GpParams.from_array(down), grid, x)) / (2 * h)
        assert analytic[j] == pytest.approx(numeric, rel=1e-4, abs=1e-6)


def test_gls_mu_zeroes_the_mu_score(grid, cohort):
    mu_hat = gpmodel.gls_mu(THETA, grid, cohort)
    scores = gpmodel.score_matrix(THETA.replace(mu=mu_hat), grid, cohort)
    assert scores[:, 0].sum() == pytest.approx(0.0, abs=1e-8)
    assert gpmodel.mu_standard_error(THETA, grid, cohort) > 0


def test_fit_with_covariance_fixed_recovers_gls_mu(grid, cohort):
    fixed = gpmodel.PARAM_NAMES[1:]
    result = gpmodel.fit_mle(cohort, grid, THETA.replace(mu=0.0), FitConfig(restarts=1, fixed=fixed))
    assert result.params.mu == pytest.approx(gpmodel.gls_mu(THETA, grid, cohort), abs=1e-4)
    assert result.params.sigma2 == pytest.approx(THETA.sigma2)


def test_fit_improves_on_initial_guess(grid, cohort):
    init = gpmodel.initial_guess(cohort, grid)
    result = gpmodel.fit_mle(cohort, grid, init, FitConfig(restarts=2, seed=1))
    assert result.loglik >= gpmodel.total_log_likelihood(init, grid, cohort) - 1e-9
    assert result.starts_ok >= 1
    assert result.params.sigma2 > 0 and result.params.alpha2 > 0 and result.params.rho2 > 0
    assert 0 < result.params.nu <= 2


@pytest.mark.slow
def test_fit_recovers_drift():
    grid = ObservationGrid.unit(np.arange(1, 21))
    data = gpmodel.simulate(THETA, grid, 200, rng_seed=21)
    result = gpmodel.fit_mle(data, grid, gpmodel.initial_guess(data, grid), FitConfig(restarts=3))
    assert result.params.mu == pytest.approx(THETA.mu, abs=0.15)
    assert result.loglik >= gpmodel.total_log_likelihood(THETA, grid, data) - 1.0


def test_fit_needs_two_subjects(grid, cohort):
    with pytest.raises(gpmodel.ParameterError):
        gpmodel.fit_mle(cohort[:1], grid, THETA)


def test_fit_result_json(grid):
    result = FitResult(THETA, -12.5, True, 17, 1e-7, 5)
    doc = result.to_json(grid)
    assert all(name in doc for name in gpmodel.PARAM_NAMES)
    back, back_grid = FitResult.from_json(doc)
    assert back.params == THETA
    assert back.loglik == -12.5 and back.converged and back.iters == 17
    assert_allclose(back_grid.times, grid.times)


@pytest.mark.parametrize("changes", [
    {"nu": 0.0}, {"nu": 2.5}, {"sigma2": -1.0}, {"alpha2": -0.1}, {"rho2": 0.0}, {"mu": math.inf},
])
def test_invalid_params(changes):
    with pytest.raises(gpmodel.ParameterError):
        THETA.replace(**changes)


def test_invalid_grids():
    with pytest.raises(gpmodel.ParameterError):
        ObservationGrid([2, 1])
    with pytest.raises(gpmodel.ParameterError):
        ObservationGrid([0, 1])
    with pytest.raises(gpmodel.ParameterError):
        ObservationGrid([1, 2], counts=[1, 1], pair_counts=[[1, 2], [2, 1]])


def test_trajectory_needs_two_observations():
    with pytest.raises(gpmodel.ParameterError):
        Trajectory("a", [1.0, np.nan, np.nan])
    assert Trajectory("b", [np.nan, 1.0, 2.0]).observed.tolist() == [False, True, True]


def test_grid_from_trajectories_and_cohort_average():
    data = [Trajectory("a", [1.0, 2.0, np.nan]), Trajectory("b", [3.0, np.nan, 5.0]), Trajectory("c", [np.nan, 4.0, 6.0])]
    mean, grid = gpmodel.cohort_average(data, [1, 2, 3])
    assert_allclose(grid.counts, [2, 2, 2])
    assert_allclose(grid.pair_counts, [[2, 1, 1], [1, 2, 1], [1, 1, 2]])
    assert_allclose(mean.values, [2.0, 3.0, 5.5])


def test_evenly_spaced_grid():
    grid = ObservationGrid.evenly_spaced(3, 150)
    assert_allclose(grid.times, [50, 100, 150])


def test_score_matches_numerical_gradient_on_random_instances():
    rng = np.random.default_rng(101)
    for instance in range(20):
        grid = ObservationGrid.unit(np.sort(rng.choice(np.arange(1, 40), size=6, replace=False)))
        params = GpParams(mu=rng.uniform(-0.5, 0.5), sigma2=rng.uniform(0.2, 2.0), alpha2=rng.uniform(0.2, 2.0),
                          beta=rng.uniform(-0.5, 0.5), rho2=rng.uniform(5.0, 80.0), nu=rng.uniform(0.5, 1.8))
        x = gpmodel.simulate(params, grid, 1, rng_seed=instance)[0]
        analytic = gpmodel.score(params, grid, x)
        theta = params.as_array()
        for j in range(theta.size):
            h = 1e-4 * (1 + abs(theta[j]))
            up, down = theta.copy(), theta.copy()
            up[j] += h
            down[j] -= h
            numeric = (gpmodel.log_likelihood(GpParams.from_array(up), grid, x)
                       - gpmodel.log_likelihood(GpParams.from_array(down), grid, x)) / (2 * h)
            assert analytic[j] == pytest.approx(numeric, rel=1e-4, abs=1e-6), (instance, gpmodel.PARAM_NAMES[j])


def test_total_log_likelihood_ignores_subject_order(grid, cohort):
    order = np.random.default_rng(2).permutation(len(cohort))
    shuffled = [cohort[i] for i in order]
    assert gpmodel.total_log_likelihood(THETA, grid, shuffled) == pytest.approx(
        gpmodel.total_log_likelihood(THETA, grid, cohort), rel=1e-12)


def test_log_likelihood_ignores_joint_reordering_of_time_points(grid):
    x = gpmodel.simulate(THETA, grid, 1, rng_seed=9)[0].values
    cov = gpmodel.build_covariance(THETA, grid)
    mean = gpmodel.mean_vector(THETA, grid)
    order = np.random.default_rng(3).permutation(grid.size)
    reordered = stats.multivariate_normal(mean[order], cov[np.ix_(order, order)]).logpdf(x[order])
    assert gpmodel.log_likelihood(THETA, grid, x) == pytest.approx(reordered, rel=1e-10)


def test_fisher_score_has_zero_mean_at_truth(grid):
    scores = gpmodel.score_matrix(THETA, grid, gpmodel.simulate(THETA, grid, 4000, rng_seed=31))
    se = scores.std(axis=0, ddof=1) / math.sqrt(scores.shape[0])
    assert np.all(np.abs(scores.mean(axis=0)) < 4 * se)


def test_fit_that_never_improves_is_not_converged(grid, cohort, monkeypatch):
    def worse_than_start(fun, x0, **kwargs):
        x = np.array(x0, dtype=float)
        x[0] += 5.0
        return gpmodel.optimize.OptimizeResult(x=x, fun=fun(x)[0], success=True, nit=3, message="stub")

    monkeypatch.setattr(gpmodel.optimize, "minimize", worse_than_start)
    result = gpmodel.fit_mle(cohort, grid, THETA, FitConfig(restarts=2))
    assert result.params == THETA
    assert result.loglik == pytest.approx(gpmodel.total_log_likelihood(THETA, grid, cohort))
    assert not result.converged
    assert result.iters == 0
    assert result.grad_norm > 0


@pytest.mark.slow
def test_fit_recovers_drift_across_replicates():
    grid = ObservationGrid.evenly_spaced(20, 150)
    hits = 0
    for rep in range(100):
        data = gpmodel.simulate(THETA, grid, 200, rng_seed=1000 + rep)
        result = gpmodel.fit_mle(data, grid, gpmodel.initial_guess(data, grid), FitConfig(restarts=1, seed=rep))
        se = gpmodel.mu_standard_error(result.params, grid, data)
        hits += abs(result.params.mu - THETA.mu) <= 3 * se
    assert hits >= 95
