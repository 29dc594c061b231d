"""
Two-sample tests in feature space: unbiased MMD and kernel Hotelling with
permutation thresholds, Hotelling T^2 with its F reference distribution.
"""

from __future__ import annotations

import logging
import math

from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence, Tuple

import numpy as np

from scipy import linalg
from scipy.spatial.distance import cdist, pdist

from kernelrct import special, utils

log = logging.getLogger(__name__)

MMD_PERMUTATION = "MMD-permutation"
KERNEL_HOTELLING = "kernel-Hotelling"
HOTELLING_F = "Hotelling-F"

PRINTED_WEIGHTS = "printed"
STANDARD_WEIGHTS = "standard"
POOLED_WEIGHTS = (PRINTED_WEIGHTS, STANDARD_WEIGHTS)

DEFAULT_N_PERM = 1000
MIN_N_PERM = 100
SINGULAR_RTOL = 1e-12


class SampleError(ValueError):
    pass


class SingularCovarianceError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class Sample:
    """One arm: either explicit feature vectors (n x d) or raw items with a kernel evaluator."""
    label: str
    features: Optional[np.ndarray] = None
    items: Optional[Sequence[Any]] = None
    kernel: Optional[Callable[[Any, Any], float]] = None

    def __post_init__(self):
        if (self.features is None) == (self.items is None):
            raise SampleError(f"{self.label}: give either features or items")
        if self.features is not None:
            features = np.array(self.features, dtype=float)
            if features.ndim == 1:
                features = features[:, None]
            if features.ndim != 2 or features.shape[0] == 0:
                raise SampleError(f"{self.label}: features must be a non-empty n x d array")
            if not np.all(np.isfinite(features)):
                raise SampleError(f"{self.label}: non-finite feature values")
            features.flags.writeable = False
            object.__setattr__(self, "features", features)
        else:
            items = list(self.items)
            if not items:
                raise SampleError(f"{self.label}: empty sample")
            if self.kernel is None:
                raise SampleError(f"{self.label}: raw items need a kernel evaluator")
            object.__setattr__(self, "items", items)

    @property
    def size(self) -> int:
        return self.features.shape[0] if self.features is not None else len(self.items)

    @property
    def dim(self) -> Optional[int]:
        return self.features.shape[1] if self.features is not None else None


@dataclass(frozen=True)
class MeanEmbedding:
    vector: np.ndarray

    @classmethod
    def of(cls, sample:Sample) -> MeanEmbedding:
        return cls(np.mean(feature_matrix(sample), axis=0))


@dataclass(frozen=True)
class TestResult:
    __test__ = False

    method: str
    statistic: float
    threshold: float
    p_value: float
    reject: bool
    n_T: int
    n_C: int
    alpha: float
    seed: Optional[int] = None
    n_perm: Optional[int] = None
    dof: Optional[Tuple[float, float]] = None
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p-value out of range: {self.p_value}")
        if self.reject != (self.statistic > self.threshold):
            raise ValueError("reject must be statistic > threshold")

    def verdict(self) -> str:
        decision = "reject H0" if self.reject else "retain H0"
        return (f"{self.method}: statistic={self.statistic:.6g} threshold={self.threshold:.6g} "
                f"p={self.p_value:.4g} -> {decision} at alpha={self.alpha}")

    def to_json(self) -> dict:
        doc = {
            "method": self.method,
            "statistic": self.statistic,
            "threshold": self.threshold,
            "p_value": self.p_value,
            "reject": self.reject,
            "n_T": self.n_T,
            "n_C": self.n_C,
            "alpha": self.alpha,
            "seed": self.seed,
            "n_perm": self.n_perm,
        }
        if self.dof is not None:
            doc["dof"] = list(self.dof)
        doc.update(self.details)
        return doc


class LinearKernel:
    def __call__(self, x, y) -> float:
        return float(np.dot(np.ravel(x), np.ravel(y)))

    def gram(self, items:Sequence[Any]) -> np.ndarray:
        x = _rows(items)
        g = x @ x.T
        return 0.5 * (g + g.T)


class GaussianKernel:
    """exp(-|x-y|^2 / (2 bandwidth^2))"""

    def __init__(self, bandwidth:float):
        if not bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {bandwidth}")
        self.bandwidth = float(bandwidth)

    def __call__(self, x, y) -> float:
        d2 = float(np.sum((np.ravel(x) - np.ravel(y)) ** 2))
        return math.exp(-0.5 * d2 / self.bandwidth ** 2)

    def gram(self, items:Sequence[Any]) -> np.ndarray:
        x = _rows(items)
        return np.exp(-0.5 * cdist(x, x, "sqeuclidean") / self.bandwidth ** 2)


def median_heuristic(features:np.ndarray) -> float:
    """Median pairwise Euclidean distance; 1.0 if all points coincide."""
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        return 1.0
    median = float(np.median(pdist(x)))
    return median if median > 0 else 1.0


def _rows(items:Sequence[Any]) -> np.ndarray:
    x = np.asarray(items, dtype=float)
    return x[:, None] if x.ndim == 1 else x.reshape(x.shape[0], -1)


def gram_matrix(items:Sequence[Any], kernel:Callable[[Any, Any], float]) -> np.ndarray:
    """K[i, j] = kernel(items[i], items[j]); evaluators with a gram() method are used directly."""
    items = list(items)
    if hasattr(kernel, "gram"):
        return np.asarray(kernel.gram(items), dtype=float)
    n = len(items)
    g = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            g[i, j] = g[j, i] = kernel(items[i], items[j])
    return g


def feature_matrix(sample:Sample) -> np.ndarray:
    if sample.features is not None:
        return sample.features
    if hasattr(sample.kernel, "features"):
        return np.asarray(sample.kernel.features(sample.items), dtype=float)
    raise SampleError(f"{sample.label}: explicit feature vectors required")


def _check_sizes(xT:Sample, xC:Sample, minimum:int=2):
    if xT.size < minimum or xC.size < minimum:
        raise SampleError(f"each group needs at least {minimum} members, got n_T={xT.size}, n_C={xC.size}")
    if xT.dim is not None and xC.dim is not None and xT.dim != xC.dim:
        raise SampleError(f"feature dimensions differ: {xT.dim} vs {xC.dim}")


def joint_gram(xT:Sample, xC:Sample, kernel:Callable[[Any, Any], float]=None) -> np.ndarray:
    """Gram matrix over the concatenation (treated first, then control)."""
    kernel = kernel or xT.kernel or xC.kernel or LinearKernel()
    if xT.features is not None and xC.features is not None:
        items = list(np.vstack([xT.features, xC.features]))
    elif xT.items is not None and xC.items is not None:
        items = xT.items + xC.items
    else:
        raise SampleError("cannot mix feature vectors and raw items")
    return gram_matrix(items, kernel)


def _mmd_from_gram(gram:np.ndarray, t_idx:np.ndarray, c_idx:np.ndarray) -> float:
    # fsum is order independent, so swapping the groups gives the identical value
    n_t = t_idx.size
    n_c = c_idx.size
    ktt = gram[np.ix_(t_idx, t_idx)]
    kcc = gram[np.ix_(c_idx, c_idx)]
    ktc = gram[np.ix_(t_idx, c_idx)]
    within_t = (math.fsum(ktt.ravel()) - math.fsum(np.diag(ktt))) / (n_t * (n_t - 1))
    within_c = (math.fsum(kcc.ravel()) - math.fsum(np.diag(kcc))) / (n_c * (n_c - 1))
    cross = math.fsum(ktc.ravel()) / (n_t * n_c)
    return within_t + within_c - 2 * cross


def mmd_unbiased(xT:Sample, xC:Sample, kernel:Callable[[Any, Any], float]=None) -> float:
    _check_sizes(xT, xC)
    gram = joint_gram(xT, xC, kernel)
    n_t = xT.size
    return _mmd_from_gram(gram, np.arange(n_t), np.arange(n_t, n_t + xC.size))


def _check_test_args(alpha:float, n_perm:int):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if n_perm < MIN_N_PERM:
        raise ValueError(f"at least {MIN_N_PERM} permutations required, got {n_perm}")


def permutations(n:int, n_perm:int, rng_seed:int) -> list:
    """Relabelings of n pooled items, one independent stream per replicate."""
    return utils.ordered_map(lambda s: np.random.default_rng(s).permutation(n),
                             utils.child_seeds(rng_seed, n_perm))


def critical_rank(alpha:float, n_perm:int) -> int:
    """Largest k with k / (n_perm + 1) <= alpha; a p-value (1 + b) / (n_perm + 1) rejects iff 1 + b <= k."""
    k = min(int(math.floor(alpha * (n_perm + 1))), n_perm)
    while k < n_perm and (k + 1) / (n_perm + 1) <= alpha:
        k += 1
    while k > 0 and k / (n_perm + 1) > alpha:
        k -= 1
    return k


def permutation_threshold(null:np.ndarray, alpha:float) -> float:
    """k-th largest permuted statistic, k = critical_rank; +inf when no p-value can reach alpha."""
    k = critical_rank(alpha, null.size)
    if k == 0:
        return math.inf
    return float(np.sort(null)[null.size - k])


def _permutation_result(method:str, observed:float, null:np.ndarray, n_t:int, n_c:int,
                        alpha:float, n_perm:int, seed:int, details:dict=None) -> TestResult:
    threshold = permutation_threshold(null, alpha)
    exceed = int(np.count_nonzero(null >= observed))
    p_value = (1 + exceed) / (n_perm + 1)
    return TestResult(method, float(observed), threshold, p_value, bool(observed > threshold),
                      n_t, n_c, alpha, seed, n_perm, details=details or {})


def mmd_permutation_test(xT:Sample, xC:Sample, alpha:float=0.05, n_perm:int=DEFAULT_N_PERM,
                         rng_seed:int=0, kernel:Callable[[Any, Any], float]=None) -> TestResult:
    """Group sizes stay fixed under relabeling; the Gram matrix is computed once."""
    _check_sizes(xT, xC)
    _check_test_args(alpha, n_perm)
    gram = joint_gram(xT, xC, kernel)
    n_t = xT.size
    n = n_t + xC.size
    observed = _mmd_from_gram(gram, np.arange(n_t), np.arange(n_t, n))
    null = np.array(utils.ordered_map(lambda perm: _mmd_from_gram(gram, perm[:n_t], perm[n_t:]),
                                      permutations(n, n_perm, rng_seed)))
    result = _permutation_result(MMD_PERMUTATION, observed, null, n_t, xC.size, alpha, n_perm, rng_seed)
    log.debug("%s", result.verdict())
    return result


def _group_weights(n_t:int, n_c:int, weights:str) -> Tuple[float, float]:
    if weights == PRINTED_WEIGHTS:
        return (n_t - 1) / (n_t + n_c + 2), (n_c + 1) / (n_t + n_c + 2)
    if weights == STANDARD_WEIGHTS:
        return (n_t - 1) / (n_t + n_c - 2), (n_c - 1) / (n_t + n_c - 2)
    raise ValueError(f"unknown pooled weights '{weights}', expected one of {', '.join(POOLED_WEIGHTS)}")


def within_covariance(xt:np.ndarray, xc:np.ndarray, weights:str=PRINTED_WEIGHTS) -> np.ndarray:
    """Weighted sum of the two within-group (ddof=1) covariance matrices."""
    w_t, w_c = _group_weights(xt.shape[0], xc.shape[0], weights)
    cov_t = np.atleast_2d(np.cov(xt, rowvar=False, ddof=1))
    cov_c = np.atleast_2d(np.cov(xc, rowvar=False, ddof=1))
    return w_t * cov_t + w_c * cov_c


@dataclass(frozen=True)
class KernelHotelling:
    statistic: float
    quadratic: float
    d1: float
    d2: float


def _kernel_hotelling(xt:np.ndarray, xc:np.ndarray, gamma:float, weights:str) -> KernelHotelling:
    delta = xc.mean(axis=0) - xt.mean(axis=0)
    lam, vec = linalg.eigh(within_covariance(xt, xc, weights))
    lam = np.maximum(lam, 0.0)
    if gamma == 0 and lam[0] <= SINGULAR_RTOL * max(lam[-1], 0.0):
        raise SingularCovarianceError("within-group covariance is singular, use gamma > 0")
    denom = lam + gamma
    ratio = lam / denom
    d1 = float(np.sum(ratio))
    d2 = float(np.sum(ratio ** 2))
    if d2 <= 0:
        raise SingularCovarianceError("within-group covariance is zero")
    proj = vec.T @ delta
    quadratic = float(np.sum(proj ** 2 / denom))
    return KernelHotelling((quadratic - d1) / math.sqrt(2 * d2), quadratic, d1, d2)


def kernel_hotelling(xT:Sample, xC:Sample, gamma:float=0.0, weights:str=PRINTED_WEIGHTS) -> float:
    """(<dmu, (S_W + gamma I)^-1 dmu> - d1) / sqrt(2 d2) on explicit features."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    _check_sizes(xT, xC)
    return _kernel_hotelling(feature_matrix(xT), feature_matrix(xC), gamma, weights).statistic


def kernel_hotelling_terms(xT:Sample, xC:Sample, gamma:float=0.0, weights:str=PRINTED_WEIGHTS) -> KernelHotelling:
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    _check_sizes(xT, xC)
    return _kernel_hotelling(feature_matrix(xT), feature_matrix(xC), gamma, weights)


def kernel_hotelling_test(xT:Sample, xC:Sample, gamma:float=0.0, alpha:float=0.05,
                          n_perm:int=DEFAULT_N_PERM, rng_seed:int=0,
                          weights:str=PRINTED_WEIGHTS) -> TestResult:
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    _check_sizes(xT, xC)
    _check_test_args(alpha, n_perm)
    pooled = np.vstack([feature_matrix(xT), feature_matrix(xC)])
    n_t = xT.size
    observed = _kernel_hotelling(pooled[:n_t], pooled[n_t:], gamma, weights).statistic

    def _stat(perm):
        rows = pooled[perm]
        return _kernel_hotelling(rows[:n_t], rows[n_t:], gamma, weights).statistic

    null = np.array(utils.ordered_map(_stat, permutations(pooled.shape[0], n_perm, rng_seed)))
    result = _permutation_result(KERNEL_HOTELLING, observed, null, n_t, xC.size, alpha, n_perm, rng_seed,
                                 {"gamma": gamma, "pooled_weights": weights})
    log.debug("%s", result.verdict())
    return result


def pooled_covariance(xT:Sample, xC:Sample) -> np.ndarray:
    """Unbiased pooled covariance ((n_T-1) S_T + (n_C-1) S_C) / (n_T + n_C - 2)."""
    _check_sizes(xT, xC, minimum=1)
    xt = feature_matrix(xT)
    xc = feature_matrix(xC)
    n_t, n_c = xt.shape[0], xc.shape[0]
    if n_t + n_c < 3:
        raise SampleError("pooled covariance needs n_T + n_C >= 3")
    scatter = np.zeros((xt.shape[1], xt.shape[1]))
    for x in (xt, xc):
        centered = x - x.mean(axis=0)
        scatter += centered.T @ centered
    return scatter / (n_t + n_c - 2)


@dataclass(frozen=True)
class HotellingT2:
    t2: float
    f_stat: float
    dof1: int
    dof2: int
    p_value: float


def hotelling_t2(xT:Sample, xC:Sample) -> HotellingT2:
    _check_sizes(xT, xC, minimum=1)
    xt = feature_matrix(xT)
    xc = feature_matrix(xC)
    n_t, n_c = xt.shape[0], xc.shape[0]
    p = xt.shape[1]
    if n_t + n_c - 2 < p:
        raise SampleError(f"n_T + n_C - 2 = {n_t + n_c - 2} is smaller than the dimension {p}")
    cov = pooled_covariance(xT, xC)
    lam = linalg.eigvalsh(cov)
    if lam[0] <= SINGULAR_RTOL * max(lam[-1], 0.0):
        raise SingularCovarianceError(f"pooled covariance is singular (smallest eigenvalue {lam[0]:.3e})")
    diff = xt.mean(axis=0) - xc.mean(axis=0)
    factor = linalg.cho_factor(cov, lower=True)
    t2 = n_t * n_c / (n_t + n_c) * float(diff @ linalg.cho_solve(factor, diff))
    dof2 = n_t + n_c - 1 - p
    f_stat = (n_t + n_c - p - 1) / ((n_t + n_c - 2) * p) * t2
    return HotellingT2(t2, f_stat, p, dof2, special.f_sf(f_stat, p, dof2))


def hotelling_test(xT:Sample, xC:Sample, alpha:float=0.05) -> TestResult:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    h = hotelling_t2(xT, xC)
    threshold = special.f_ppf(1.0 - alpha, h.dof1, h.dof2)
    return TestResult(HOTELLING_F, h.f_stat, threshold, h.p_value, bool(h.f_stat > threshold),
                      xT.size, xC.size, alpha, dof=(h.dof1, h.dof2), details={"t2": h.t2})


# vim: set et sw=4 ts=4:
