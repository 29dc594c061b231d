"""
Linear mixed model with subject random intercept and group-by-time interaction:

    y_it = b0 + b0_i + b1 t + b2 g_i + b3 g_i t + e_it,   b0_i ~ N(0, s2_subject), e_it ~ N(0, s2_resid)

g_i = 1 for the treated arm. Fitted by maximum likelihood: the random intercept
is integrated out (compound symmetry per subject), beta is solved by GLS and
the log-likelihood is profiled over r = s2_subject / s2_resid.
"""

from __future__ import annotations

import csv
import logging
import math
import pathlib

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from scipy import linalg, optimize, stats

from kernelrct import gpmodel, utils
from kernelrct.gpmodel import ObservationGrid, Trajectory
from kernelrct.ingest import CsvFormatError
from kernelrct.power import PowerCurve, PowerDesign, PowerRow, split_total
from kernelrct.twosample import TestResult

log = logging.getLogger(__name__)

LMM_WALD = "LMM-Wald"
CSV_HEADER = ("subject_id", "week", "group", "value")
GROUP_LABELS = {"T": 1, "C": 0}
COEF_NAMES = ("intercept", "time", "group", "group:time")

LOG_RATIO_BOUNDS = (math.log(1e-8), math.log(1e6))
RATIO_XATOL = 1e-10
COND_MAX = 1e12
LOG_2PI = math.log(2 * math.pi)


class LmmError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LongData:
    """Long-format observations; group is 1 for treated (T), 0 for control (C)."""
    subject: np.ndarray
    week: np.ndarray
    group: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        subject = np.asarray(self.subject, dtype=str).ravel()
        week = np.asarray(self.week, dtype=float).ravel()
        group = np.asarray(self.group, dtype=int).ravel()
        value = np.asarray(self.value, dtype=float).ravel()
        n = subject.size
        if not (week.size == group.size == value.size == n):
            raise LmmError("subject, week, group and value must have the same length")
        if not np.all(np.isin(group, (0, 1))):
            raise LmmError("group must be 0 (control) or 1 (treated)")
        if not (np.all(np.isfinite(week)) and np.all(np.isfinite(value))):
            raise LmmError("non-finite week or value")
        for name, a in (("subject", subject), ("week", week), ("group", group), ("value", value)):
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    def __len__(self) -> int:
        return self.value.size

    @property
    def subjects(self) -> np.ndarray:
        return np.unique(self.subject)

    @classmethod
    def from_rows(cls, rows:Iterable[Tuple[str, float, Union[str, int], float]]) -> LongData:
        rows = list(rows)
        if not rows:
            return cls([], [], [], [])
        subject, week, group, value = zip(*rows)
        return cls(subject, week, [_group_code(g) for g in group], value)

    @classmethod
    def from_trajectories(cls, treated:Sequence[Trajectory], control:Sequence[Trajectory],
                          times:Sequence[float]) -> LongData:
        """Missing entries are dropped; subject ids get a T:/C: prefix so the arms never collide."""
        times = np.asarray(times, dtype=float)
        rows = []
        for label, arm in (("T", treated), ("C", control)):
            for traj in arm:
                if traj.values.size != times.size:
                    raise LmmError(f"{traj.subject_id}: {traj.values.size} values for {times.size} time points")
                keep = traj.observed
                sid = f"{label}:{traj.subject_id}"
                rows.extend((sid, t, label, y) for t, y in zip(times[keep], traj.values[keep]))
        return cls.from_rows(rows)

    def rows(self) -> List[tuple]:
        labels = np.where(self.group == 1, "T", "C")
        return [(s, _fmt_number(w), g, float(v)) for s, w, g, v in zip(self.subject, self.week, labels, self.value)]

    def save_csv(self, path:Union[pathlib.Path, str]):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            writer.writerows(self.rows())

    @classmethod
    def load_csv(cls, path:Union[pathlib.Path, str]) -> LongData:
        errors = []
        rows = []
        seen = {}
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
                raise CsvFormatError(path, [(1, f"expected header {','.join(CSV_HEADER)}")])
            for row in reader:
                line = reader.line_num
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != len(CSV_HEADER):
                    errors.append((line, f"expected {len(CSV_HEADER)} fields, got {len(row)}"))
                    continue
                sid, week, group, value = (c.strip() for c in row)
                try:
                    key = (sid, float(week))
                    code = _group_code(group)
                    y = float(value)
                except (ValueError, LmmError) as exc:
                    errors.append((line, str(exc)))
                    continue
                if not sid:
                    errors.append((line, "empty subject_id"))
                    continue
                if key in seen:
                    errors.append((line, f"duplicate row for subject {sid} week {week} (first on line {seen[key]})"))
                    continue
                seen[key] = line
                rows.append((sid, key[1], code, y))
        if errors:
            raise CsvFormatError(path, errors)
        return cls.from_rows(rows)


def _fmt_number(x:float):
    return int(x) if float(x).is_integer() else float(x)


def _group_code(group:Union[str, int]) -> int:
    if isinstance(group, (int, np.integer)) and group in (0, 1):
        return int(group)
    label = str(group).strip().upper()
    if label not in GROUP_LABELS:
        raise LmmError(f"group must be T or C, got '{group}'")
    return GROUP_LABELS[label]


@dataclass(frozen=True)
class LmmFit:
    beta: np.ndarray
    sigma2_subject: float
    sigma2_resid: float
    se_beta3: float
    loglik: float
    cov_beta: np.ndarray
    boundary: bool = False
    n_subjects: int = 0
    n_obs: int = 0
    n_T: int = 0
    n_C: int = 0

    @property
    def beta3(self) -> float:
        return float(self.beta[3])

    def to_json(self) -> dict:
        return {
            "beta": dict(zip(COEF_NAMES, self.beta.tolist())),
            "sigma2_subject": self.sigma2_subject,
            "sigma2_resid": self.sigma2_resid,
            "se_beta3": self.se_beta3,
            "loglik": self.loglik,
            "boundary": self.boundary,
            "n_subjects": self.n_subjects,
            "n_obs": self.n_obs,
            "n_T": self.n_T,
            "n_C": self.n_C,
        }


class _Profile:
    """Per-subject sufficient statistics for the compound-symmetry likelihood."""

    def __init__(self, data:LongData):
        ids, codes = np.unique(data.subject, return_inverse=True)
        codes = np.asarray(codes).ravel()
        self.n_subjects = ids.size
        self.codes = codes
        self.counts = np.bincount(codes, minlength=ids.size).astype(float)
        t = data.week
        g = data.group.astype(float)
        self.x = np.column_stack([np.ones_like(t), t, g, g * t])
        self.y = data.value
        self.n = self.y.size
        self.xsum = np.vstack([np.bincount(codes, weights=col, minlength=ids.size) for col in self.x.T]).T
        self.ysum = np.bincount(codes, weights=self.y, minlength=ids.size)
        self.xtx = self.x.T @ self.x
        self.xty = self.x.T @ self.y

        groups = np.bincount(codes, weights=g, minlength=ids.size) / self.counts
        if not np.all((groups == 0) | (groups == 1)):
            bad = ids[(groups != 0) & (groups != 1)]
            raise LmmError(f"subjects switch group: {', '.join(bad[:5])}")
        self.n_treated = int(np.count_nonzero(groups == 1))
        self.n_control = int(np.count_nonzero(groups == 0))
        if np.count_nonzero(groups == 1) < 2 or np.count_nonzero(groups == 0) < 2:
            raise LmmError("at least 2 subjects per group required")
        if np.any(self.counts < 2):
            raise LmmError(f"{ids[self.counts < 2][0]}: at least 2 time points per subject required")
        if np.unique(t).size < 2:
            raise LmmError("at least 2 distinct time points required")

    def weights(self, ratio:float) -> np.ndarray:
        return ratio / (1.0 + self.counts * ratio)

    def gls(self, ratio:float) -> Tuple[np.ndarray, np.ndarray, float]:
        """beta, X'V^-1 X (in units of 1/s2_resid) and the weighted residual sum of squares."""
        c = self.weights(ratio)
        xwx = self.xtx - self.xsum.T @ (c[:, None] * self.xsum)
        xwy = self.xty - self.xsum.T @ (c * self.ysum)
        xwx = 0.5 * (xwx + xwx.T)
        if np.linalg.cond(xwx) > COND_MAX:
            raise LmmError("fixed effects are not identifiable from this design")
        beta = linalg.solve(xwx, xwy, assume_a="pos")
        resid = self.y - self.x @ beta
        rsum = np.bincount(self.codes, weights=resid, minlength=self.n_subjects)
        rss = float(resid @ resid - c @ (rsum * rsum))
        return beta, xwx, rss

    def loglik(self, ratio:float) -> float:
        _, _, rss = self.gls(ratio)
        s2 = rss / self.n
        if not s2 > 0:
            return -math.inf
        return -0.5 * (self.n * (LOG_2PI + math.log(s2) + 1.0) + float(np.sum(np.log1p(self.counts * ratio))))


def marginal_loglik(data:LongData, beta:Sequence[float], sigma2_subject:float, sigma2_resid:float) -> float:
    """Marginal log-likelihood at given parameters via the closed-form compound-symmetry inverse."""
    prof = _Profile(data)
    ratio = sigma2_subject / sigma2_resid
    c = prof.weights(ratio)
    resid = prof.y - prof.x @ np.asarray(beta, dtype=float)
    rsum = np.bincount(prof.codes, weights=resid, minlength=prof.n_subjects)
    quad = (resid @ resid - c @ (rsum * rsum)) / sigma2_resid
    logdet = prof.n * math.log(sigma2_resid) + float(np.sum(np.log1p(prof.counts * ratio)))
    return -0.5 * (prof.n * LOG_2PI + logdet + quad)


def fit_lmm(data:LongData, fixed_ratio:Optional[float]=None) -> LmmFit:
    """ML fit; fixed_ratio pins s2_subject/s2_resid (0 gives ordinary least squares)."""
    prof = _Profile(data)
    boundary = False
    if fixed_ratio is not None:
        if fixed_ratio < 0:
            raise LmmError(f"variance ratio must be >= 0, got {fixed_ratio}")
        ratio = float(fixed_ratio)
    else:
        res = optimize.minimize_scalar(lambda lr: -prof.loglik(math.exp(lr)), bounds=LOG_RATIO_BOUNDS,
                                       method="bounded", options={"xatol": RATIO_XATOL})
        ratio = math.exp(res.x)
        if prof.loglik(0.0) >= prof.loglik(ratio):
            ratio = 0.0
            boundary = True
        elif res.x <= LOG_RATIO_BOUNDS[0] + 1e-3:
            boundary = True
        if boundary:
            log.debug("random intercept variance at the zero boundary")
    beta, xwx, rss = prof.gls(ratio)
    s2 = rss / prof.n
    if not s2 > 0:
        raise LmmError("residual variance is zero")
    cov = s2 * linalg.inv(xwx)
    cov = 0.5 * (cov + cov.T)
    se = math.sqrt(cov[3, 3]) if cov[3, 3] > 0 else 0.0
    if se <= 0:
        raise LmmError("interaction coefficient has zero standard error")
    return LmmFit(
        beta=beta,
        sigma2_subject=ratio * s2,
        sigma2_resid=s2,
        se_beta3=se,
        loglik=prof.loglik(ratio),
        cov_beta=cov,
        boundary=boundary,
        n_subjects=prof.n_subjects,
        n_obs=prof.n,
        n_T=prof.n_treated,
        n_C=prof.n_control,
    )


def lmm_interaction_test(fit:LmmFit, alpha:float=0.05) -> TestResult:
    """Two-sided Wald z test of the group-by-time coefficient."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    z = fit.beta3 / fit.se_beta3
    statistic = abs(z)
    threshold = float(stats.norm.isf(alpha / 2))
    p_value = min(1.0, 2 * float(stats.norm.sf(statistic)))
    details = {"z": z, "beta3": fit.beta3, "se_beta3": fit.se_beta3, "boundary": fit.boundary}
    if fit.boundary:
        details["caveat"] = "random intercept variance estimated at the zero boundary"
    return TestResult(LMM_WALD, statistic, threshold, p_value, bool(statistic > threshold),
                      fit.n_T, fit.n_C, alpha, details=details)


@dataclass(frozen=True)
class LmmTruth:
    """Data generated exactly from the mixed model (times shared by all subjects)."""
    beta: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    sigma2_subject: float = 1.0
    sigma2_resid: float = 1.0

    def simulate_long(self, n_per_arm:int, grid:ObservationGrid,
                      seed:Union[int, np.random.SeedSequence]) -> LongData:
        rng = np.random.default_rng(seed)
        t = grid.times
        b0, b1, b2, b3 = self.beta
        rows = []
        for label, g in (("T", 1), ("C", 0)):
            intercepts = rng.normal(0.0, math.sqrt(self.sigma2_subject), n_per_arm)
            noise = rng.normal(0.0, math.sqrt(self.sigma2_resid), (n_per_arm, t.size))
            y = b0 + intercepts[:, None] + (b1 + b3 * g) * t + b2 * g + noise
            for i in range(n_per_arm):
                sid = f"{label}{i:04d}"
                rows.extend((sid, w, label, v) for w, v in zip(t, y[i]))
        return LongData.from_rows(rows)

    def analytic_power(self, n_per_arm:int, grid:ObservationGrid, alpha:float=0.05) -> float:
        """Wald power for a balanced complete design, where the slope estimate ignores the intercept variance."""
        t = grid.times
        sxx = float(np.sum((t - t.mean()) ** 2))
        se = math.sqrt(self.sigma2_resid * 2.0 / n_per_arm / sxx)
        return wald_power(abs(self.beta[3]) / se, alpha)


def wald_power(standardized:float, alpha:float) -> float:
    z = float(stats.norm.isf(alpha / 2))
    return float(stats.norm.cdf(standardized - z) + stats.norm.cdf(-standardized - z))


@dataclass(frozen=True)
class MonteCarloPower:
    power: float
    se: float
    n_ok: int
    n_failed: int
    p_values: Tuple[float, ...] = field(default=(), repr=False)

    def to_json(self) -> dict:
        return {"power": self.power, "se": self.se, "n_ok": self.n_ok, "n_failed": self.n_failed}


def rejection_rate(p_values:Sequence[float], alpha:float, n_failed:int=0) -> MonteCarloPower:
    p = np.asarray(p_values, dtype=float)
    n_ok = p.size
    if n_ok == 0:
        return MonteCarloPower(float("nan"), float("nan"), 0, n_failed, ())
    rate = float(np.count_nonzero(p <= alpha)) / n_ok
    return MonteCarloPower(rate, math.sqrt(rate * (1 - rate) / n_ok), n_ok, n_failed, tuple(p.tolist()))


def lmm_power_mc(generator, n_per_arm:int, n_timepoints:int, alpha:float=0.05, n_sims:int=1000,
                 rng_seed:int=0, span_weeks:float=gpmodel.DEFAULT_SPAN_WEEKS) -> MonteCarloPower:
    """Fraction of simulated trials in which the interaction test rejects.

    generator needs simulate_long(n_per_arm, grid, seed) -> LongData. Replicates
    that fail to fit are counted, not fatal.
    """
    grid = ObservationGrid.evenly_spaced(n_timepoints, span_weeks)

    def _replicate(seed):
        try:
            data = generator.simulate_long(n_per_arm, grid, seed)
            return lmm_interaction_test(fit_lmm(data), alpha).p_value
        except (LmmError, ArithmeticError, linalg.LinAlgError) as exc:
            log.warning("LMM replicate skipped: %s", exc)
            return None

    results = utils.ordered_map(_replicate, utils.child_seeds(rng_seed, n_sims))
    ok = [p for p in results if p is not None]
    mc = rejection_rate(ok, alpha, len(results) - len(ok))
    if mc.n_failed:
        log.warning("%d of %d LMM replicates failed", mc.n_failed, n_sims)
    return mc


def lmm_power_curve(fit:LmmFit, n_fit_T:int, n_fit_C:int, rho:float, alpha:float,
                    n_grid:Sequence[int], allocation=(1, 1)) -> PowerCurve:
    """Wald power for a trial whose slope difference is (1 - rho) times the fitted one.

    The standard error is rescaled from the fitted arm sizes to the planned ones
    by sqrt(1/n_T + 1/n_C).
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    # standardized effect per unit of sqrt(1/n_T + 1/n_C)
    effect = (1.0 - rho) * abs(fit.beta3) / (fit.se_beta3 / math.sqrt(1.0 / n_fit_T + 1.0 / n_fit_C))
    return wald_power_curve(effect, alpha, n_grid, allocation)


def wald_power_curve(effect:float, alpha:float, n_grid:Sequence[int], allocation=(1, 1)) -> PowerCurve:
    design = PowerDesign(tuple(allocation), alpha, 1, effect)
    rows = []
    for n_total in n_grid:
        n_t, n_c = split_total(int(n_total), design.allocation)
        if n_t < 1 or n_c < 1:
            raise ValueError(f"n_total={n_total} leaves an empty arm")
        rows.append(PowerRow(int(n_total), n_t, n_c, wald_power(effect / math.sqrt(1.0 / n_t + 1.0 / n_c), alpha)))
    return PowerCurve(design, tuple(rows))


# vim: set et sw=4 ts=4:
