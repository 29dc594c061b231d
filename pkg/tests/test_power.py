import csv
import math

import numpy as np
import pytest

from numpy.testing import assert_allclose
from scipy import stats

from kernelrct import fisherkernel, gpmodel, power, twosample
from kernelrct.gpmodel import GpParams, ObservationGrid
from kernelrct.power import LocalAlternative, PowerCurve, PowerDesign, PowerRow
from kernelrct.twosample import Sample


def _oracle(n_t, n_c, p, alpha, effect):
    dof2 = n_t + n_c - 1 - p
    crit = stats.f.ppf(1 - alpha, p, dof2)
    return stats.ncf.sf(crit, p, dof2, n_t * n_c / (n_t + n_c) * effect ** 2)


@pytest.mark.parametrize("n_t, n_c, effect", [(20, 20, 0.5), (40, 20, 0.8), (100, 100, 0.2), (11, 11, 1.5)])
def test_power_matches_scipy(n_t, n_c, effect):
    assert power.power_at(n_t, n_c, 6, 0.05, effect) == pytest.approx(_oracle(n_t, n_c, 6, 0.05, effect), abs=1e-8)


def test_zero_effect_gives_alpha():
    assert power.power_at(30, 30, 6, 0.05, 0.0) == pytest.approx(0.05, rel=1e-9)
    assert power.power_at(30, 30, 6, 0.01, 0.0) == pytest.approx(0.01, rel=1e-9)


def test_power_increases_with_n_and_effect():
    by_n = [power.power_at(n, n, 6, 0.05, 0.4) for n in (10, 20, 40, 80, 160)]
    assert all(a < b for a, b in zip(by_n, by_n[1:]))
    by_effect = [power.power_at(30, 30, 6, 0.05, e) for e in (0.1, 0.3, 0.6, 1.0)]
    assert all(a < b for a, b in zip(by_effect, by_effect[1:]))


def test_noncentrality():
    assert power.noncentrality(20, 30, 0.5) == pytest.approx(20 * 30 / 50 * 0.25)


def test_infeasible_design():
    with pytest.raises(power.InfeasibleDesignError):
        power.power_at(3, 3, 6, 0.05, 1.0)
    with pytest.raises(power.PowerError):
        power.power_at(30, 30, 6, 0.05, -0.1)
    with pytest.raises(power.PowerError):
        power.power_at(30, 30, 6, 0.0, 0.5)


@pytest.mark.parametrize("effect, allocation", [(0.6, (1, 1)), (0.35, (1, 1)), (0.6, (2, 1)), (1.2, 1.5)])
def test_sample_size_is_smallest_on_lattice(effect, allocation):
    n_t, n_c = power.sample_size_for_power(0.8, 6, 0.05, effect, allocation)
    a, b = power._allocation(allocation)
    assert n_t * b == n_c * a
    k = n_t // a
    assert power.power_at(n_t, n_c, 6, 0.05, effect) >= 0.8
    k_min = max(1, math.ceil(8 / (a + b)))
    if k - 1 >= k_min:
        assert power.power_at(a * (k - 1), b * (k - 1), 6, 0.05, effect) < 0.8


def test_sample_size_matches_linear_scan():
    effect = 0.5
    n = next(n for n in range(4, 1000) if power.power_at(n, n, 6, 0.05, effect) >= 0.9)
    assert power.sample_size_for_power(0.9, 6, 0.05, effect) == (n, n)


def test_sample_size_errors():
    with pytest.raises(power.PowerError):
        power.sample_size_for_power(0.01, 6, 0.05, 0.5)
    with pytest.raises(power.PowerError):
        power.sample_size_for_power(0.8, 6, 0.05, 0.0)
    with pytest.raises(power.SampleSizeError):
        power.sample_size_for_power(0.8, 6, 0.05, 1e-4, cap=1000)


def test_split_total():
    assert power.split_total(40) == (20, 20)
    assert power.split_total(30, (2, 1)) == (20, 10)
    assert power.split_total(41) == (20, 21) or power.split_total(41) == (21, 20)


def test_effect_size():
    assert power.effect_size([3.0, 4.0], np.eye(2)) == pytest.approx(5.0)
    assert power.effect_size([2.0, 0.0], np.diag([4.0, 1.0])) == pytest.approx(1.0)
    with pytest.raises(twosample.SingularCovarianceError):
        power.effect_size([1.0, 1.0], np.ones((2, 2)))
    with pytest.raises(power.PowerError):
        power.effect_size([1.0, 1.0, 1.0], np.eye(2))


@pytest.fixture
def cohorts():
    rng = np.random.default_rng(0)
    return Sample("A", rng.normal(size=(40, 6)) + 0.5), Sample("S", rng.normal(size=(30, 6)))


def test_local_alternative(cohorts):
    xa, xs = cohorts
    alt = power.local_alternative_from_cohorts(xa, xs, rho=0.4)
    assert_allclose(alt.shift, 0.6 * (xa.features.mean(axis=0) - xs.features.mean(axis=0)))
    assert alt.dim == 6
    effect = power.effect_from_alternative(alt, xa, xs)
    expected = power.effect_size(alt.shift, twosample.pooled_covariance(xa, xs))
    assert effect == pytest.approx(expected)
    full = power.effect_from_alternative(power.local_alternative_from_cohorts(xa, xs, rho=0.0), xa, xs)
    assert effect == pytest.approx(0.6 * full)


def test_rho_one_gives_flat_curve_at_alpha(cohorts):
    xa, xs = cohorts
    alt = power.local_alternative_from_cohorts(xa, xs, rho=1.0)
    effect = power.effect_from_alternative(alt, xa, xs)
    curve = power.power_curve([20, 40, 80], 6, 0.05, effect)
    assert_allclose([row.power for row in curve.rows], 0.05, rtol=1e-9)


def test_local_alternative_checks():
    with pytest.raises(power.PowerError):
        LocalAlternative([0.0, 1.0], [0.0], 0.4)
    with pytest.raises(power.PowerError):
        LocalAlternative([0.0], [1.0], 1.5)


def test_power_curve_rows_and_csv(tmp_path):
    grid = list(range(20, 201, 20))
    curve = power.power_curve(grid, 6, 0.05, 0.5)
    assert len(curve.rows) == len(grid)
    assert [row.n_total for row in curve.rows] == grid
    assert all(row.n_T + row.n_C == row.n_total for row in curve.rows)
    path = tmp_path / "power.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(power.CSV_HEADER)
        writer.writerows((n, t, c, repr(p)) for n, t, c, p in curve.csv_rows())
    back = PowerCurve.read_csv(path, curve.design)
    assert back.to_json() == curve.to_json()
    assert PowerCurve.from_json(curve.to_json()).to_json() == curve.to_json()


def test_power_curve_n_for_power():
    curve = power.power_curve(range(20, 401, 20), 6, 0.05, 0.5)
    n = curve.n_for_power(0.8)
    n_t, n_c = power.sample_size_for_power(0.8, 6, 0.05, 0.5)
    assert n >= n_t + n_c
    assert n - 20 < n_t + n_c
    assert power.power_curve([20], 6, 0.05, 0.01).n_for_power(0.8) is None


def test_power_curve_must_be_monotone():
    design = PowerDesign((1, 1), 0.05, 6, 0.5)
    with pytest.raises(power.PowerError):
        PowerCurve(design, (PowerRow(20, 10, 10, 0.5), PowerRow(40, 20, 20, 0.4)))
    with pytest.raises(power.PowerError):
        PowerCurve(design, (PowerRow(20, 10, 10, 1.5),))


def test_power_runs_end_to_end():
    assert power.power_at(30, 30, 6, 0.05, 0.5) == pytest.approx(_oracle(30, 30, 6, 0.05, 0.5), abs=1e-8)
    rng = np.random.default_rng(8)
    result = twosample.hotelling_test(Sample("T", rng.normal(size=(20, 3))), Sample("C", rng.normal(size=(20, 3))))
    assert result.threshold == pytest.approx(stats.f.ppf(0.95, 3, 36), rel=1e-9)
    assert result.reject == (result.p_value < 0.05)
    n_t, n_c = power.sample_size_for_power(0.8, 6, 0.05, 0.5)
    assert power.power_at(n_t, n_c, 6, 0.05, 0.5) >= 0.8


def test_power_is_symmetric_in_arm_sizes():
    assert power.power_at(20, 45, 6, 0.05, 0.4) == pytest.approx(power.power_at(45, 20, 6, 0.05, 0.4), rel=1e-12)


@pytest.mark.slow
def test_power_matches_simulated_fisher_vector_trials():
    theta = GpParams(mu=0.0, sigma2=1.0, alpha2=0.5, beta=0.5, rho2=50.0, nu=1.5)
    treated = theta.replace(mu=0.008)
    grid = ObservationGrid.evenly_spaced(6, 150)
    embedding = fisherkernel.build_embedding(theta, grid, gpmodel.simulate(theta, grid, 2000, rng_seed=1))
    big_t = Sample("T", fisherkernel.fisher_vectors(embedding, gpmodel.simulate(treated, grid, 5000, rng_seed=2)))
    big_c = Sample("C", fisherkernel.fisher_vectors(embedding, gpmodel.simulate(theta, grid, 5000, rng_seed=3)))
    shift = big_t.features.mean(axis=0) - big_c.features.mean(axis=0)
    effect = power.effect_size(shift, twosample.pooled_covariance(big_t, big_c))
    expected = power.power_at(30, 30, 6, 0.05, effect)
    assert 0.2 < expected < 0.9

    reps = 5000
    rejections = 0
    for r in range(reps):
        xt = fisherkernel.fisher_vectors(embedding, gpmodel.simulate(treated, grid, 30, rng_seed=10 + 2 * r))
        xc = fisherkernel.fisher_vectors(embedding, gpmodel.simulate(theta, grid, 30, rng_seed=11 + 2 * r))
        rejections += twosample.hotelling_t2(Sample("T", xt), Sample("C", xc)).p_value < 0.05
    assert rejections / reps == pytest.approx(expected, abs=0.02)
