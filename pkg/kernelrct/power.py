"""
Power and sample size for the Hotelling T^2 test on Fisher vectors under the
local alternative that moves the treated arm a fraction (1 - rho) of the way
from the symptomatic towards the asymptomatic mean embedding.
"""

from __future__ import annotations

import csv
import logging
import math
import pathlib

from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from scipy import linalg

from kernelrct import special, twosample, utils
from kernelrct.twosample import Sample

log = logging.getLogger(__name__)

DEFAULT_RHO = 0.4
DEFAULT_TARGET_POWER = 0.8
N_CAP = 10 ** 6
CSV_HEADER = ("n_total", "n_T", "n_C", "power")
MONOTONE_TOL = 1e-12


class PowerError(ValueError):
    pass


class InfeasibleDesignError(PowerError):
    pass


class SampleSizeError(PowerError):
    pass


@dataclass(frozen=True, eq=False)
class LocalAlternative:
    mu_A: np.ndarray
    mu_S: np.ndarray
    rho: float = DEFAULT_RHO

    def __post_init__(self):
        mu_a = np.array(self.mu_A, dtype=float).ravel()
        mu_s = np.array(self.mu_S, dtype=float).ravel()
        if mu_a.shape != mu_s.shape:
            raise PowerError(f"mean embeddings differ in dimension: {mu_a.size} vs {mu_s.size}")
        if not 0.0 <= self.rho <= 1.0:
            raise PowerError(f"rho must be in [0, 1], got {self.rho}")
        mu_a.flags.writeable = False
        mu_s.flags.writeable = False
        object.__setattr__(self, "mu_A", mu_a)
        object.__setattr__(self, "mu_S", mu_s)

    @property
    def shift(self) -> np.ndarray:
        return (1.0 - self.rho) * (self.mu_A - self.mu_S)

    @property
    def dim(self) -> int:
        return self.mu_A.size

    def to_json(self) -> dict:
        return {"mu_A": self.mu_A.tolist(), "mu_S": self.mu_S.tolist(), "rho": self.rho,
                "shift": self.shift.tolist()}


def local_alternative_from_cohorts(asymptomatic:Sample, symptomatic:Sample, rho:float=DEFAULT_RHO) -> LocalAlternative:
    """Historical cohort means are treated as constants."""
    mu_a = twosample.MeanEmbedding.of(asymptomatic).vector
    mu_s = twosample.MeanEmbedding.of(symptomatic).vector
    if mu_a.size != mu_s.size:
        raise PowerError(f"cohort feature dimensions differ: {mu_a.size} vs {mu_s.size}")
    return LocalAlternative(mu_a, mu_s, rho)


def effect_size(shift:Sequence[float], sigma_pooled:np.ndarray) -> float:
    """sqrt(shift' Sigma^-1 shift)"""
    shift = np.asarray(shift, dtype=float).ravel()
    sigma = np.atleast_2d(np.asarray(sigma_pooled, dtype=float))
    if sigma.shape != (shift.size, shift.size):
        raise PowerError(f"covariance shape {sigma.shape} does not match shift of length {shift.size}")
    try:
        factor = linalg.cho_factor(sigma, lower=True)
    except linalg.LinAlgError:
        raise twosample.SingularCovarianceError("pooled covariance is not positive definite") from None
    value = float(shift @ linalg.cho_solve(factor, shift))
    return math.sqrt(max(value, 0.0))


def effect_from_alternative(alternative:LocalAlternative, asymptomatic:Sample, symptomatic:Sample) -> float:
    return effect_size(alternative.shift, twosample.pooled_covariance(asymptomatic, symptomatic))


def noncentrality(n_T:int, n_C:int, effect:float) -> float:
    return n_T * n_C / (n_T + n_C) * effect ** 2


def _check_alpha(alpha:float):
    if not 0.0 < alpha < 1.0:
        raise PowerError(f"alpha must be in (0, 1), got {alpha}")


def power_at(n_T:int, n_C:int, p:int, alpha:float, effect:float) -> float:
    """P(F(p, n_T+n_C-1-p; delta) > f_crit), delta = n_T n_C/(n_T+n_C) * effect^2."""
    _check_alpha(alpha)
    if effect < 0:
        raise PowerError(f"effect size must be >= 0, got {effect}")
    if n_T < 1 or n_C < 1 or p < 1:
        raise InfeasibleDesignError(f"invalid design n_T={n_T}, n_C={n_C}, p={p}")
    dof2 = n_T + n_C - 1 - p
    if dof2 < 1:
        raise InfeasibleDesignError(f"n_T + n_C = {n_T + n_C} leaves no denominator degrees of freedom for p={p}")
    crit = special.f_ppf(1.0 - alpha, p, dof2)
    return special.noncentral_f_sf(crit, p, dof2, noncentrality(n_T, n_C, effect))


def _allocation(allocation:Union[float, Tuple[int, int]]) -> Tuple[int, int]:
    if isinstance(allocation, (tuple, list)):
        a, b = (int(v) for v in allocation)
    else:
        ratio = Fraction(allocation).limit_denominator(1000)
        a, b = ratio.numerator, ratio.denominator
    if a < 1 or b < 1:
        raise PowerError(f"allocation ratio must be positive, got {allocation}")
    return a, b


def sample_size_for_power(target_power:float, p:int, alpha:float, effect:float,
                          allocation:Union[float, Tuple[int, int]]=(1, 1), cap:int=N_CAP) -> Tuple[int, int]:
    """Smallest design (a*k, b*k) on the allocation lattice with power >= target_power.

    Power is non-decreasing in k, so the search gallops to a feasible upper
    bound and then bisects.
    """
    _check_alpha(alpha)
    if not alpha < target_power < 1.0:
        raise PowerError(f"target power must be in (alpha, 1) = ({alpha}, 1), got {target_power}")
    if not effect > 0:
        raise PowerError(f"effect size must be positive, got {effect}")
    a, b = _allocation(allocation)
    k_min = max(1, math.ceil((p + 2) / (a + b)))

    def _power(k):
        return power_at(a * k, b * k, p, alpha, effect)

    if _power(k_min) >= target_power:
        return a * k_min, b * k_min
    lo = k_min
    hi = 2 * k_min
    while _power(hi) < target_power:
        lo = hi
        if (a + b) * hi > cap:
            raise SampleSizeError(f"effect {effect:.4g} needs more than {cap} subjects for power {target_power}")
        hi *= 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _power(mid) >= target_power:
            hi = mid
        else:
            lo = mid
    if (a + b) * hi > cap:
        raise SampleSizeError(f"effect {effect:.4g} needs more than {cap} subjects for power {target_power}")
    return a * hi, b * hi


def split_total(n_total:int, allocation:Union[float, Tuple[int, int]]=(1, 1)) -> Tuple[int, int]:
    a, b = _allocation(allocation)
    n_t = int(round(n_total * a / (a + b)))
    return n_t, n_total - n_t


@dataclass(frozen=True)
class PowerDesign:
    allocation: Tuple[int, int]
    alpha: float
    p: int
    effect: float

    def to_json(self) -> dict:
        return {"allocation": list(self.allocation), "alpha": self.alpha, "p": self.p, "effect": self.effect}

    @classmethod
    def from_json(cls, doc:dict) -> PowerDesign:
        return cls(tuple(doc["allocation"]), float(doc["alpha"]), int(doc["p"]), float(doc["effect"]))


@dataclass(frozen=True)
class PowerRow:
    n_total: int
    n_T: int
    n_C: int
    power: float


@dataclass(frozen=True)
class PowerCurve:
    design: PowerDesign
    rows: Tuple[PowerRow, ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(sorted(self.rows, key=lambda r: r.n_total)))
        for row in self.rows:
            if not 0.0 <= row.power <= 1.0:
                raise PowerError(f"power out of range at n={row.n_total}: {row.power}")
        for prev, row in zip(self.rows, self.rows[1:]):
            if row.power < prev.power - MONOTONE_TOL:
                raise PowerError(f"power decreases from n={prev.n_total} to n={row.n_total}")

    def n_for_power(self, target:float=DEFAULT_TARGET_POWER) -> Optional[int]:
        return next((row.n_total for row in self.rows if row.power >= target), None)

    def to_json(self) -> dict:
        return {
            "design": self.design.to_json(),
            "rows": [{"n_total": r.n_total, "n_T": r.n_T, "n_C": r.n_C, "power": r.power} for r in self.rows],
        }

    @classmethod
    def from_json(cls, doc:dict) -> PowerCurve:
        rows = [PowerRow(int(r["n_total"]), int(r["n_T"]), int(r["n_C"]), float(r["power"])) for r in doc["rows"]]
        return cls(PowerDesign.from_json(doc["design"]), tuple(rows))

    def csv_rows(self) -> List[tuple]:
        return [(r.n_total, r.n_T, r.n_C, r.power) for r in self.rows]

    @classmethod
    def read_csv(cls, path:Union[pathlib.Path, str], design:PowerDesign) -> PowerCurve:
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if tuple(header or ()) != CSV_HEADER:
                raise PowerError(f"{path}: expected header {','.join(CSV_HEADER)}")
            rows = [PowerRow(int(r[0]), int(r[1]), int(r[2]), float(r[3])) for r in reader if r]
        return cls(design, tuple(rows))


def power_curve(n_grid:Sequence[int], p:int, alpha:float, effect:float,
                allocation:Union[float, Tuple[int, int]]=(1, 1)) -> PowerCurve:
    """Power at each total sample size of n_grid, split by the allocation ratio."""
    design = PowerDesign(_allocation(allocation), alpha, p, float(effect))

    def _row(n_total):
        n_t, n_c = split_total(int(n_total), design.allocation)
        return PowerRow(int(n_total), n_t, n_c, power_at(n_t, n_c, p, alpha, effect))

    return PowerCurve(design, tuple(utils.ordered_map(_row, n_grid)))


# vim: set et sw=4 ts=4:
