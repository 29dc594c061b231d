"""
Regularized incomplete beta, central and noncentral F distributions.

The noncentral F CDF is the Poisson mixture
    sum_k e^(-d/2) (d/2)^k / k! * I_y(p/2 + k, q/2),   y = p x / (p x + q)
summed outwards from the modal term until the remaining Poisson mass is below
SERIES_TOL.
"""

import logging
import math

import numpy as np

from scipy import optimize
from scipy.special import gammaln

log = logging.getLogger(__name__)

CF_EPS = 1e-16
CF_TINY = 1e-300
CF_MAX_ITER = 100000
SERIES_TOL = 1e-12
SERIES_MAX_TERMS = 100000
BRENT_RTOL = 4 * np.finfo(float).eps


class SeriesError(ArithmeticError):
    def __init__(self, message:str, partial_sum:float=float("nan"), terms:int=0):
        super().__init__(message)
        self.partial_sum = partial_sum
        self.terms = terms


def _betacf(a:float, b:float, x:float) -> float:
    """Continued fraction for the incomplete beta, modified Lentz evaluation."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < CF_TINY:
        d = CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < CF_TINY:
            d = CF_TINY
        c = 1.0 + aa / c
        if abs(c) < CF_TINY:
            c = CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < CF_TINY:
            d = CF_TINY
        c = 1.0 + aa / c
        if abs(c) < CF_TINY:
            c = CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < CF_EPS:
            return h
    raise SeriesError(f"incomplete beta continued fraction did not converge for a={a}, b={b}, x={x}", h, CF_MAX_ITER)


def _log_front(a:float, b:float, x:float) -> float:
    return gammaln(a + b) - gammaln(a) - gammaln(b) + a * math.log(x) + b * math.log1p(-x)


def betainc(a:float, b:float, x:float) -> float:
    """Regularized incomplete beta I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if a <= 0 or b <= 0:
        raise ValueError(f"betainc needs a, b > 0, got a={a}, b={b}")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"betainc needs 0 <= x <= 1, got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    if x < (a + 1.0) / (a + b + 2.0):
        value = math.exp(_log_front(a, b, x)) * _betacf(a, b, x) / a
    else:
        value = 1.0 - math.exp(_log_front(a, b, x)) * _betacf(b, a, 1.0 - x) / b
    return min(max(value, 0.0), 1.0)


def betainc_upper(a:float, b:float, x:float) -> float:
    """1 - I_x(a, b) without cancellation in the upper tail."""
    return betainc(b, a, 1.0 - x)


def _check_dof(dfn:float, dfd:float):
    if dfn <= 0 or dfd <= 0:
        raise ValueError(f"degrees of freedom must be positive, got ({dfn}, {dfd})")


def f_cdf(x:float, dfn:float, dfd:float) -> float:
    _check_dof(dfn, dfd)
    if x <= 0:
        return 0.0
    if math.isinf(x):
        return 1.0
    return betainc(0.5 * dfn, 0.5 * dfd, dfn * x / (dfn * x + dfd))


def f_sf(x:float, dfn:float, dfd:float) -> float:
    _check_dof(dfn, dfd)
    if x <= 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    return betainc(0.5 * dfd, 0.5 * dfn, dfd / (dfn * x + dfd))


def f_ppf(q:float, dfn:float, dfd:float) -> float:
    """Quantile of the central F, solved against f_sf so that f_sf(f_ppf(1-a)) == a to rounding."""
    _check_dof(dfn, dfd)
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must be in (0, 1), got {q}")
    tail = 1.0 - q
    hi = 1.0
    while f_sf(hi, dfn, dfd) > tail:
        hi *= 2.0
        if hi > 1e300:
            raise SeriesError(f"F quantile {q} out of range for dof ({dfn}, {dfd})")
    lo = 0.0 if hi == 1.0 else hi / 2.0
    return optimize.brentq(lambda x: f_sf(x, dfn, dfd) - tail, lo, hi, xtol=1e-300, rtol=BRENT_RTOL, maxiter=500)


def _poisson_log_weight(k:int, half:float) -> float:
    return k * math.log(half) - half - gammaln(k + 1)


def noncentral_f_cdf(x:float, dfn:float, dfd:float, delta:float) -> float:
    """P(F' <= x) for the noncentral F(dfn, dfd; delta)."""
    _check_dof(dfn, dfd)
    if delta < 0:
        raise ValueError(f"noncentrality must be >= 0, got {delta}")
    if x <= 0:
        return 0.0
    if delta == 0:
        return f_cdf(x, dfn, dfd)
    if math.isinf(x):
        return 1.0
    y = dfn * x / (dfn * x + dfd)
    half = 0.5 * delta
    mode = int(math.floor(half))

    total = 0.0
    mass = 0.0
    terms = 0
    # outwards from the mode: downwards until k=0 or negligible, upwards until the mass is exhausted
    k = mode
    while k >= 0:
        w = math.exp(_poisson_log_weight(k, half))
        total += w * betainc(0.5 * dfn + k, 0.5 * dfd, y)
        mass += w
        terms += 1
        if w < SERIES_TOL * 1e-3 and k < mode:
            break
        k -= 1
    k = mode + 1
    while 1.0 - mass > SERIES_TOL:
        if terms >= SERIES_MAX_TERMS:
            raise SeriesError(
                f"noncentral F series did not converge within {SERIES_MAX_TERMS} terms "
                f"(x={x}, dof=({dfn}, {dfd}), delta={delta}, partial sum {total:.6g}, mass {mass:.6g})",
                total, terms)
        w = math.exp(_poisson_log_weight(k, half))
        if w == 0.0 and k > half:
            # weights underflowed past the mode: the rest is below double precision
            break
        total += w * betainc(0.5 * dfn + k, 0.5 * dfd, y)
        mass += w
        terms += 1
        k += 1
    return min(max(total, 0.0), 1.0)


def noncentral_f_sf(x:float, dfn:float, dfd:float, delta:float) -> float:
    if delta == 0:
        return f_sf(x, dfn, dfd)
    return min(max(1.0 - noncentral_f_cdf(x, dfn, dfd, delta), 0.0), 1.0)


# vim: set et sw=4 ts=4:
