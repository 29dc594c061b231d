"""
Fisher embedding of trajectories under a fitted GP model.

    phi(x) = grad_theta ln f(x, theta_hat)         Fisher score
    I      = 1/n sum_i phi(z_i) phi(z_i)'          empirical information
    psi(x) = (I + eps*Id)^(-1/2) phi(x)             Fisher vector
    K(x,y) = psi(x)' psi(y)                         Fisher kernel
"""

from __future__ import annotations

import logging

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from scipy import linalg

from kernelrct import gpmodel, utils
from kernelrct.gpmodel import GpParams, ObservationGrid, Trajectory

log = logging.getLogger(__name__)

DIM = len(gpmodel.PARAM_NAMES)
EPS_SCALE = 1e-6
EIG_FLOOR = 1e-15
SCORE_CHUNK = 64


def _inverse_sqrt(matrix:np.ndarray, eps:float) -> np.ndarray:
    """(matrix + eps*Id)^(-1/2) by symmetric eigendecomposition, eigenvalues floored at eps."""
    sym = 0.5 * (matrix + matrix.T) + eps * np.eye(matrix.shape[0])
    w, v = linalg.eigh(sym)
    floor = max(eps, EIG_FLOOR * max(float(w[-1]), 0.0))
    if floor <= 0:
        raise gpmodel.CovarianceError("information matrix is zero and no regularization given", float(w[0]))
    w = np.maximum(w, floor)
    out = (v / np.sqrt(w)) @ v.T
    return 0.5 * (out + out.T)


def default_eps(info:np.ndarray) -> float:
    eps = EPS_SCALE * float(np.trace(info)) / info.shape[0]
    return eps if eps > 0 else EPS_SCALE


@dataclass(frozen=True, eq=False)
class FisherEmbedding:
    theta_hat: GpParams
    info: np.ndarray
    info_inv_sqrt: np.ndarray
    grid: ObservationGrid
    regularization_eps: float
    n_samples: int = 0
    rank_deficient: bool = False

    @classmethod
    def from_information(cls, theta_hat:GpParams, grid:ObservationGrid, info:np.ndarray,
                         eps:Optional[float]=None, n_samples:int=0, rank_deficient:bool=False) -> FisherEmbedding:
        info = np.array(info, dtype=float)
        if info.shape != (DIM, DIM):
            raise gpmodel.ParameterError(f"information matrix must be {DIM}x{DIM}, got {info.shape}")
        if not np.allclose(info, info.T, rtol=1e-10, atol=1e-12 * max(1.0, float(np.abs(info).max()))):
            raise gpmodel.ParameterError("information matrix is not symmetric")
        info = 0.5 * (info + info.T)
        eps = default_eps(info) if eps is None else float(eps)
        if eps < 0:
            raise gpmodel.ParameterError(f"regularization must be >= 0, got {eps}")
        inv_sqrt = _inverse_sqrt(info, eps)
        info.flags.writeable = False
        inv_sqrt.flags.writeable = False
        return cls(theta_hat, info, inv_sqrt, grid, eps, n_samples, rank_deficient)

    def to_json(self) -> dict:
        return {
            **self.theta_hat.to_dict(),
            "grid": self.grid.to_dict(),
            "info": self.info.ravel().tolist(),
            "eps": self.regularization_eps,
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_json(cls, doc:dict) -> FisherEmbedding:
        info = np.asarray(doc["info"], dtype=float)
        if info.size != DIM * DIM:
            raise gpmodel.ParameterError(f"'info' must hold {DIM * DIM} numbers, got {info.size}")
        return cls.from_information(
            GpParams.from_dict(doc),
            ObservationGrid.from_dict(doc["grid"]),
            info.reshape(DIM, DIM),
            eps=doc.get("eps"),
            n_samples=int(doc.get("n_samples", 0)),
        )


def _score_rows(theta_hat:GpParams, grid:ObservationGrid, data:Sequence[Trajectory]) -> np.ndarray:
    if len(data) == 0:
        return np.empty((0, DIM))
    blocks = utils.ordered_map(
        lambda chunk: gpmodel.score_matrix(theta_hat, grid, chunk),
        utils.chunks(list(data), SCORE_CHUNK))
    return np.vstack(blocks)


def _second_moment(scores:np.ndarray) -> np.ndarray:
    n = scores.shape[0]
    return (scores.T @ scores) / n


def estimate_information(theta_hat:GpParams, grid:ObservationGrid, data:Sequence[Trajectory],
                         eps:Optional[float]=None) -> np.ndarray:
    """Empirical outer-product information (1/n) sum phi phi' + eps*Id."""
    if len(data) == 0:
        raise gpmodel.ParameterError("information needs at least one trajectory")
    info = _second_moment(_score_rows(theta_hat, grid, data))
    _check_rank(info, len(data))
    eps = default_eps(info) if eps is None else eps
    return info + eps * np.eye(DIM)


def _check_rank(info:np.ndarray, n:int) -> bool:
    deficient = n < DIM + 1 or np.linalg.matrix_rank(info) < DIM
    if deficient:
        log.warning("Fisher information from %d trajectories is rank deficient (rank %d of %d)",
                    n, np.linalg.matrix_rank(info), DIM)
    return deficient


def build_embedding(theta_hat:GpParams, grid:ObservationGrid, data:Sequence[Trajectory],
                    eps:Optional[float]=None) -> FisherEmbedding:
    """Embedding for individual subjects: scores are taken on the unit-count grid."""
    grid = grid.per_subject()
    if len(data) == 0:
        raise gpmodel.ParameterError("embedding needs at least one trajectory")
    info = _second_moment(_score_rows(theta_hat, grid, data))
    deficient = _check_rank(info, len(data))
    embedding = FisherEmbedding.from_information(theta_hat, grid, info, eps, len(data), deficient)
    log.info("Fisher embedding from %d trajectories, eps=%.3g", len(data), embedding.regularization_eps)
    return embedding


def fisher_score(embedding:FisherEmbedding, x:Trajectory) -> np.ndarray:
    return gpmodel.score(embedding.theta_hat, embedding.grid, x)


def fisher_vector(embedding:FisherEmbedding, x:Trajectory) -> np.ndarray:
    return fisher_vectors(embedding, [x])[0]


def fisher_vectors(embedding:FisherEmbedding, data:Sequence[Trajectory]) -> np.ndarray:
    """n x 6 matrix of Fisher vectors, one row per trajectory."""
    scores = _score_rows(embedding.theta_hat, embedding.grid, data)
    return scores @ embedding.info_inv_sqrt.T


def kernel(embedding:FisherEmbedding, x:Trajectory, x2:Trajectory) -> float:
    return float(fisher_vector(embedding, x) @ fisher_vector(embedding, x2))


class FisherKernel:
    """Kernel evaluator over trajectories. gram() embeds every item once."""

    def __init__(self, embedding:FisherEmbedding):
        self.embedding = embedding

    def __call__(self, x:Trajectory, y:Trajectory) -> float:
        return kernel(self.embedding, x, y)

    def features(self, items:Sequence[Trajectory]) -> np.ndarray:
        return fisher_vectors(self.embedding, items)

    def gram(self, items:Sequence[Trajectory]) -> np.ndarray:
        psi = self.features(items)
        g = psi @ psi.T
        return 0.5 * (g + g.T)


# vim: set et sw=4 ts=4:
