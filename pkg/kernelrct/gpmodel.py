"""
Gaussian process model for baseline-subtracted longitudinal measurements.

    y(t) = mu*t + w(t) + e(t)
    K(s,t) = alpha2 * n(s,t)/(n(s)n(t)) * s^(beta/2) t^(beta/2) * exp(-|s-t|^nu / (2 rho2))
    e(t) ~ GP(0, sigma2/n(t) * delta)

Individual subjects use unit counts, the count-weighted covariance describes
cohort averages.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import warnings

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from scipy import linalg, optimize, special

from kernelrct import utils

log = logging.getLogger(__name__)


PARAM_NAMES = ("mu", "sigma2", "alpha2", "beta", "rho2", "nu")
POSITIVE = (1, 2, 4)
BETA_BOUNDS = (-10.0, 10.0)
NU_MAX = 2.0
LOG_2PI = math.log(2 * math.pi)

JITTER_START = 1e-10
JITTER_MAX = 1e-6
DIFF_STEP = 1e-5
BAD_OBJECTIVE = 1e10
DEFAULT_SPAN_WEEKS = 150.0


class ParameterError(ValueError):
    pass


class CovarianceError(Exception):
    def __init__(self, message:str, smallest_eigenvalue:float=float("nan")):
        super().__init__(message)
        self.smallest_eigenvalue = smallest_eigenvalue


class NonConvergenceError(Exception):
    def __init__(self, message:str, best:Optional[GpParams]=None, loglik:Optional[float]=None):
        super().__init__(message)
        self.best = best
        self.loglik = loglik


@dataclass(frozen=True)
class GpParams:
    mu: float
    sigma2: float
    alpha2: float
    beta: float
    rho2: float
    nu: float

    def __post_init__(self):
        for name in PARAM_NAMES:
            object.__setattr__(self, name, float(getattr(self, name)))
        if not np.all(np.isfinite(self.as_array())):
            raise ParameterError(f"parameters must be finite: {self}")
        # zero variances are allowed here, fits always return strictly positive ones
        if self.sigma2 < 0 or self.alpha2 < 0:
            raise ParameterError(f"variances must not be negative: sigma2={self.sigma2}, alpha2={self.alpha2}")
        if self.rho2 <= 0:
            raise ParameterError(f"rho2 must be positive: {self.rho2}")
        if not 0 < self.nu <= NU_MAX:
            raise ParameterError(f"nu must be in (0, {NU_MAX}]: {self.nu}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in PARAM_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values:Sequence[float]) -> GpParams:
        if len(values) != len(PARAM_NAMES):
            raise ParameterError(f"{len(PARAM_NAMES)} parameters expected, got {len(values)}")
        return cls(*[float(v) for v in values])

    def replace(self, **changes) -> GpParams:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_dict(cls, doc:dict) -> GpParams:
        missing = [name for name in PARAM_NAMES if name not in doc]
        if missing:
            raise ParameterError(f"missing parameters: {', '.join(missing)}")
        return cls(**{name: doc[name] for name in PARAM_NAMES})


def _readonly(a:np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ObservationGrid:
    times: np.ndarray
    counts: Optional[np.ndarray] = None
    pair_counts: Optional[np.ndarray] = None

    def __post_init__(self):
        times = np.array(self.times, dtype=float).ravel()
        m = times.size
        if m == 0:
            raise ParameterError("observation grid is empty")
        if not np.all(np.isfinite(times)) or np.any(times <= 0) or np.any(np.diff(times) <= 0):
            raise ParameterError("grid times must be positive and strictly increasing")
        if self.counts is None:
            counts = np.ones(m)
        else:
            counts = np.array(self.counts, dtype=float).ravel()
        if counts.shape != (m,) or np.any(counts <= 0):
            raise ParameterError("every grid point needs a positive subject count")
        if self.pair_counts is None:
            # without pair information every subject is assumed to be seen at both times
            pairs = np.minimum.outer(counts, counts)
        else:
            pairs = np.array(self.pair_counts, dtype=float)
        if pairs.shape != (m, m):
            raise ParameterError(f"pair counts must be {m}x{m}")
        if not np.array_equal(pairs, pairs.T):
            raise ParameterError("pair counts must be symmetric")
        if not np.array_equal(np.diag(pairs), counts):
            raise ParameterError("pair counts must equal counts on the diagonal")
        if np.any(pairs < 0) or np.any(pairs > np.minimum.outer(counts, counts)):
            raise ParameterError("pair counts must lie in [0, min(n(s), n(t))]")
        object.__setattr__(self, "times", _readonly(times))
        object.__setattr__(self, "counts", _readonly(counts))
        object.__setattr__(self, "pair_counts", _readonly(pairs))

    @property
    def size(self) -> int:
        return self.times.size

    @classmethod
    def unit(cls, times:Sequence[float]) -> ObservationGrid:
        return cls(times)

    @classmethod
    def evenly_spaced(cls, n_points:int, span:float=DEFAULT_SPAN_WEEKS) -> ObservationGrid:
        """n_points unit-count times span*k/n_points, k = 1..n_points."""
        if n_points < 1 or not span > 0:
            raise ParameterError(f"need n_points >= 1 and span > 0, got {n_points}, {span}")
        return cls(span * np.arange(1, n_points + 1) / n_points)

    def per_subject(self) -> ObservationGrid:
        """The same time points with n(t) = n(s,t) = 1."""
        return ObservationGrid(self.times)

    @classmethod
    def from_trajectories(cls, times:Sequence[float], data:Sequence[Trajectory]) -> ObservationGrid:
        observed = ~np.isnan(_values(data, len(times)))
        counts = observed.sum(axis=0).astype(float)
        if np.any(counts == 0):
            empty = np.asarray(times, dtype=float)[counts == 0]
            raise ParameterError(f"no subject observed at times {empty.tolist()}")
        pairs = observed.T.astype(float) @ observed.astype(float)
        return cls(times, counts, pairs)

    def subset(self, mask:np.ndarray) -> ObservationGrid:
        idx = np.flatnonzero(mask)
        return ObservationGrid(self.times[idx], self.counts[idx], self.pair_counts[np.ix_(idx, idx)])

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, doc:dict) -> ObservationGrid:
        return cls(doc["times"], doc.get("counts"))


@dataclass(frozen=True, eq=False)
class Trajectory:
    subject_id: str
    values: np.ndarray
    cohort: Optional[str] = None
    anchor_week: Optional[int] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float).ravel()
        if values.size == 0:
            raise ParameterError(f"{self.subject_id}: empty trajectory")
        if np.any(np.isinf(values)):
            raise ParameterError(f"{self.subject_id}: infinite measurement")
        n_obs = int(np.count_nonzero(~np.isnan(values)))
        if n_obs < min(2, values.size):
            raise ParameterError(f"{self.subject_id}: at least 2 observed values required, got {n_obs}")
        object.__setattr__(self, "values", _readonly(values))

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.values)

    @property
    def complete(self) -> bool:
        return bool(np.all(self.observed))


def _values(data:Sequence[Trajectory], m:int) -> np.ndarray:
    if len(data) == 0:
        return np.empty((0, m))
    for traj in data:
        if traj.values.size != m:
            raise ParameterError(f"{traj.subject_id}: {traj.values.size} values for a grid of {m} points")
    return np.vstack([traj.values for traj in data])


def _covariance(theta:np.ndarray, grid:ObservationGrid) -> np.ndarray:
    _, sigma2, alpha2, beta, rho2, nu = theta
    t = grid.times
    ratio = grid.pair_counts / np.outer(grid.counts, grid.counts)
    growth = t ** (0.5 * beta)
    lag = np.abs(np.subtract.outer(t, t)) ** nu
    cov = alpha2 * ratio * np.outer(growth, growth) * np.exp(-lag / (2 * rho2))
    cov[np.diag_indices_from(cov)] += sigma2 / grid.counts
    return 0.5 * (cov + cov.T)


def _cholesky(cov:np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, escalating diagonal jitter up to JITTER_MAX*mean(diag)."""
    if not np.all(np.isfinite(cov)):
        raise CovarianceError("covariance has non-finite entries")
    try:
        return linalg.cholesky(cov, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(cov)))
    eye = np.eye(cov.shape[0])
    jitter = JITTER_START
    while scale > 0 and jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            chol = linalg.cholesky(cov + jitter * scale * eye, lower=True, check_finite=False)
        except linalg.LinAlgError:
            jitter *= 10
            continue
        log.debug("covariance factorized with jitter %.0e", jitter)
        return chol
    smallest = float(linalg.eigvalsh(cov)[0])
    raise CovarianceError(
        f"covariance is not positive definite after jitter (smallest eigenvalue {smallest:.3e})", smallest)


def _patterns(values:np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Group the rows of values by missingness pattern: [(observed mask, row indices)]."""
    observed = ~np.isnan(values)
    keys, inverse = np.unique(observed, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    return [(keys[k], np.flatnonzero(inverse == k)) for k in range(len(keys))]


class _Design:
    """Trajectories grouped by missingness pattern; one factorization per group and theta."""

    def __init__(self, grid:ObservationGrid, values:np.ndarray):
        self.n = values.shape[0]
        self.groups = []
        for mask, rows in _patterns(values):
            self.groups.append((grid.subset(mask), rows, values[np.ix_(rows, mask)]))

    def terms(self, theta:np.ndarray) -> np.ndarray:
        out = np.empty(self.n)
        for sub, rows, x in self.groups:
            chol = _cholesky(_covariance(theta, sub))
            z = linalg.solve_triangular(chol, (x - theta[0] * sub.times).T, lower=True, check_finite=False)
            logdet = 2 * np.sum(np.log(np.diag(chol)))
            out[rows] = -0.5 * (sub.size * LOG_2PI + logdet + np.sum(z * z, axis=0))
        return out

    def total(self, theta:np.ndarray) -> float:
        return utils.ordered_sum(self.terms(theta))

    def mu_moments(self, theta:np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per trajectory: t'S^-1 x, t'S^-1 t and the mu score t'S^-1 (x - mu t)."""
        tx = np.empty(self.n)
        tt = np.empty(self.n)
        for sub, rows, x in self.groups:
            chol = _cholesky(_covariance(theta, sub))
            w = linalg.solve_triangular(chol, sub.times, lower=True, check_finite=False)
            z = linalg.solve_triangular(chol, x.T, lower=True, check_finite=False)
            tx[rows] = w @ z
            tt[rows] = w @ w
        return tx, tt, tx - theta[0] * tt

    def scores(self, theta:np.ndarray) -> np.ndarray:
        out = np.empty((self.n, len(PARAM_NAMES)))
        out[:, 0] = self.mu_moments(theta)[2]
        for j in range(1, len(PARAM_NAMES)):
            step = DIFF_STEP * (1 + abs(theta[j]))
            up = theta.copy()
            up[j] += step
            down = theta.copy()
            down[j] -= step
            if j in POSITIVE and down[j] <= 0:
                out[:, j] = (self.terms(up) - self.terms(theta)) / (up[j] - theta[j])
            else:
                out[:, j] = (self.terms(up) - self.terms(down)) / (up[j] - down[j])
        return out


def build_covariance(params:GpParams, grid:ObservationGrid) -> np.ndarray:
    cov = _covariance(params.as_array(), grid)
    _cholesky(cov)
    return cov


def mean_vector(params:GpParams, grid:ObservationGrid) -> np.ndarray:
    return params.mu * grid.times


def log_likelihood(params:GpParams, grid:ObservationGrid, x:Union[Sequence[float], Trajectory]) -> float:
    """MVN log density of one trajectory; missing entries (NaN) are marginalized out."""
    values = x.values if isinstance(x, Trajectory) else np.asarray(x, dtype=float).ravel()
    if values.size != grid.size:
        raise ParameterError(f"{values.size} values for a grid of {grid.size} points")
    if np.all(np.isnan(values)):
        raise ParameterError("trajectory has no observed values")
    return float(_Design(grid, values[None, :]).terms(params.as_array())[0])


def total_log_likelihood(params:GpParams, grid:ObservationGrid, data:Sequence[Trajectory]) -> float:
    return _Design(grid, _values(data, grid.size)).total(params.as_array())


def score(params:GpParams, grid:ObservationGrid, x:Trajectory) -> np.ndarray:
    """Gradient of log_likelihood with respect to theta (analytic for mu)."""
    return score_matrix(params, grid, [x])[0]


def score_matrix(params:GpParams, grid:ObservationGrid, data:Sequence[Trajectory]) -> np.ndarray:
    return _Design(grid, _values(data, grid.size)).scores(params.as_array())


def gls_mu(params:GpParams, grid:ObservationGrid, data:Sequence[Trajectory]) -> float:
    """Closed-form mu maximizing the likelihood with the covariance parameters held fixed."""
    tx, tt, _ = _Design(grid, _values(data, grid.size)).mu_moments(params.as_array())
    return utils.ordered_sum(tx) / utils.ordered_sum(tt)


def mu_standard_error(params:GpParams, grid:ObservationGrid, data:Sequence[Trajectory]) -> float:
    _, tt, _ = _Design(grid, _values(data, grid.size)).mu_moments(params.as_array())
    return 1.0 / math.sqrt(utils.ordered_sum(tt))


def simulate(params:GpParams, grid:ObservationGrid, n_subjects:int,
             rng_seed:Union[int, np.random.SeedSequence], prefix:str="S", cohort:str=None) -> List[Trajectory]:
    """Draw individual subjects, i.e. with unit counts on the grid's time points."""
    if n_subjects < 1:
        raise ParameterError("at least one subject required")
    grid = grid.per_subject()
    chol = _cholesky(_covariance(params.as_array(), grid))
    rng = np.random.default_rng(rng_seed)
    draws = mean_vector(params, grid) + rng.standard_normal((n_subjects, grid.size)) @ chol.T
    width = len(str(n_subjects - 1))
    return [Trajectory(f"{prefix}{i:0{width}d}", row, cohort=cohort) for i, row in enumerate(draws)]


def cohort_average(data:Sequence[Trajectory], times:Sequence[float]) -> Tuple[Trajectory, ObservationGrid]:
    """Cohort mean y(t) over the subjects observed at t, with its count-weighted grid."""
    grid = ObservationGrid.from_trajectories(times, data)
    mean = np.nanmean(_values(data, grid.size), axis=0)
    return Trajectory("cohort-average", mean), grid


@dataclass(frozen=True)
class FitConfig:
    restarts: int = 5
    max_iter: int = 500
    gtol: float = 1e-6
    seed: int = 0
    spread: float = 0.5
    fixed: Tuple[str, ...] = ()

    def __post_init__(self):
        unknown = set(self.fixed) - set(PARAM_NAMES)
        if unknown:
            raise ParameterError(f"unknown parameters to fix: {', '.join(sorted(unknown))}")
        if self.restarts < 1 or self.max_iter < 1 or self.gtol <= 0:
            raise ParameterError("restarts and max_iter must be >= 1, gtol > 0")


@dataclass(frozen=True)
class FitResult:
    params: GpParams
    loglik: float
    converged: bool
    iters: int
    grad_norm: float
    starts_ok: int

    def to_json(self, grid:ObservationGrid) -> dict:
        return {
            **self.params.to_dict(),
            "grid": grid.to_dict(),
            "fit": {"loglik": self.loglik, "converged": self.converged, "iters": self.iters},
        }

    @classmethod
    def from_json(cls, doc:dict) -> Tuple[FitResult, ObservationGrid]:
        fit = doc.get("fit", {})
        result = cls(
            params=GpParams.from_dict(doc),
            loglik=float(fit.get("loglik", float("nan"))),
            converged=bool(fit.get("converged", False)),
            iters=int(fit.get("iters", 0)),
            grad_norm=float("nan"),
            starts_ok=0,
        )
        return result, ObservationGrid.from_dict(doc["grid"])


def _to_unconstrained(theta:np.ndarray) -> np.ndarray:
    eta = theta.copy()
    eta[list(POSITIVE)] = np.log(theta[list(POSITIVE)])
    eta[5] = special.logit(min(theta[5], NU_MAX * (1 - 1e-9)) / NU_MAX)
    return eta


def _from_unconstrained(eta:np.ndarray) -> np.ndarray:
    theta = eta.copy()
    theta[list(POSITIVE)] = np.exp(eta[list(POSITIVE)])
    theta[5] = NU_MAX * special.expit(eta[5])
    return theta


def _chain(theta:np.ndarray) -> np.ndarray:
    """d theta / d eta, diagonal."""
    d = np.ones_like(theta)
    d[list(POSITIVE)] = theta[list(POSITIVE)]
    d[5] = theta[5] * (1 - theta[5] / NU_MAX)
    return d


DEFAULT_INIT = GpParams(mu=0.0, sigma2=1.0, alpha2=1.0, beta=0.0, rho2=10.0, nu=1.0)


def initial_guess(data:Sequence[Trajectory], grid:ObservationGrid, base:GpParams=DEFAULT_INIT) -> GpParams:
    """base with mu replaced by its GLS estimate and the variances scaled to the data."""
    grid = grid.per_subject()
    values = _values(data, grid.size)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        spread = float(np.nanmean(np.nanvar(values, axis=0))) if values.shape[0] > 1 else 1.0
    if not np.isfinite(spread) or spread <= 0:
        spread = 1.0
    start = base.replace(sigma2=0.5 * spread, alpha2=0.5 * spread)
    return start.replace(mu=gls_mu(start, grid, data))


def fit_mle(data:Sequence[Trajectory], grid:ObservationGrid, init:GpParams,
            config:FitConfig=None) -> FitResult:
    """
    Maximize the summed per-subject log-likelihood in unconstrained coordinates
    with L-BFGS-B and random restarts around init. The first start is init itself.
    """
    config = config or FitConfig()
    if len(data) < 2:
        raise ParameterError("at least 2 trajectories required")
    if init.sigma2 <= 0 or init.alpha2 <= 0:
        raise ParameterError("initial variances must be positive")
    if not BETA_BOUNDS[0] <= init.beta <= BETA_BOUNDS[1]:
        raise ParameterError(f"initial beta outside {BETA_BOUNDS}")

    design = _Design(grid.per_subject(), _values(data, grid.size))
    theta0 = init.as_array()
    eta0 = _to_unconstrained(theta0)
    free = np.array([name not in config.fixed for name in PARAM_NAMES])
    bounds = [BETA_BOUNDS if j == 3 else (None, None) for j in np.flatnonzero(free)]

    def objective(eta_free:np.ndarray) -> Tuple[float, np.ndarray]:
        eta = eta0.copy()
        eta[free] = eta_free
        theta = _from_unconstrained(eta)
        try:
            value = -design.total(theta) / design.n
            grad = -np.mean(design.scores(theta), axis=0) * _chain(theta)
        except CovarianceError:
            # pushes the line search back towards well-conditioned covariances
            return BAD_OBJECTIVE, np.zeros(int(free.sum()))
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return BAD_OBJECTIVE, np.zeros(int(free.sum()))
        return value, grad[free]

    init_loglik = design.total(theta0)
    if not free.any():
        return FitResult(init, init_loglik, True, 0, 0.0, 0)
    log.info("fit: %s subjects, %s time points, initial loglik %.6g", design.n, grid.size, init_loglik)

    rng = np.random.default_rng(config.seed)
    starts = [eta0[free]]
    for _ in range(config.restarts - 1):
        start = eta0[free] + config.spread * rng.standard_normal(int(free.sum()))
        for k, (lo, hi) in enumerate(bounds):
            if lo is not None:
                start[k] = np.clip(start[k], lo, hi)
        starts.append(start)

    best = None
    starts_ok = 0
    for i, start in enumerate(starts):
        try:
            res = optimize.minimize(
                objective, start, jac=True, method="L-BFGS-B", bounds=bounds,
                options={"maxiter": config.max_iter, "gtol": config.gtol, "ftol": 1e-15})
        except (CovarianceError, linalg.LinAlgError, FloatingPointError, ParameterError) as exc:
            log.warning("fit: start %s failed: %s", i, exc)
            continue
        if not np.isfinite(res.fun) or res.fun >= BAD_OBJECTIVE:
            log.warning("fit: start %s ended at a degenerate covariance", i)
            continue
        starts_ok += 1
        log.info("fit: start %s: loglik %.6g after %s iterations (%s)", i, -res.fun * design.n, res.nit, res.message)
        if best is None or res.fun < best.fun:
            best = res

    init_params = GpParams.from_array(theta0)
    if best is None:
        raise NonConvergenceError("all optimizer starts failed", best=init_params, loglik=init_loglik)

    eta = eta0.copy()
    eta[free] = best.x
    theta = _from_unconstrained(eta)
    loglik = design.total(theta)
    converged = bool(best.success) and best.nit < config.max_iter
    iters = int(best.nit)
    if loglik < init_loglik:
        log.warning("fit: no start improved on the initial parameters")
        theta, loglik = theta0, init_loglik
        converged, iters = False, 0
    grad_norm = float(np.max(np.abs(objective(_to_unconstrained(theta)[free])[1]))) if free.any() else 0.0
    return FitResult(
        params=GpParams.from_array(theta),
        loglik=loglik,
        converged=converged,
        iters=iters,
        grad_norm=grad_norm,
        starts_ok=starts_ok,
    )


# vim: set et sw=4 ts=4:
