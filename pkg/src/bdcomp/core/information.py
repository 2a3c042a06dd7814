"""Gaussian and categorical information measures.

All quantities are in nats. Log-determinants always go through a Cholesky
factorization; a covariance that is not positive definite gets one round of
jitter before the computation gives up.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, NamedTuple, Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit, softmax, xlogy

from bdcomp.core.exceptions import DegenerateDensityError, DimensionMismatchError

logger = logging.getLogger(__name__)

LOG_2PI_E = float(np.log(2 * np.pi * np.e))
JITTER = 1e-10
SYMMETRY_TOLERANCE = 1e-10


@dataclass(frozen=True)
class GaussianDensity:
    """Multivariate normal density given by its mean and covariance."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if mean.ndim != 1:
            raise DimensionMismatchError(f"mean must be a vector, got shape {mean.shape}")
        if cov.shape != (mean.size, mean.size):
            raise DimensionMismatchError(
                f"covariance shape {cov.shape} does not match mean length {mean.size}"
            )
        if mean.size:
            scale = max(float(np.max(np.abs(cov))), 1.0)
            if np.max(np.abs(cov - cov.T)) > SYMMETRY_TOLERANCE * scale:
                raise DegenerateDensityError("covariance is not symmetric")
            cov = 0.5 * (cov + cov.T)
            eigenvalues = np.linalg.eigvalsh(cov)
            if eigenvalues[0] < -SYMMETRY_TOLERANCE * max(eigenvalues[-1], 0.0) - 1e-300:
                raise DegenerateDensityError(
                    f"covariance is not positive semi-definite (smallest eigenvalue {eigenvalues[0]:.3g})"
                )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return int(self.mean.size)

    @property
    def variances(self) -> np.ndarray:
        return np.diag(self.covariance).copy()

    @classmethod
    def from_variances(cls, mean: Sequence[float], variances: Sequence[float]) -> "GaussianDensity":
        return cls(np.asarray(mean, dtype=float), np.diag(np.asarray(variances, dtype=float)))

    def restrict(self, indices: Sequence[int]) -> "GaussianDensity":
        """Marginal density over a subset of dimensions."""
        idx = np.asarray(indices, dtype=int)
        return GaussianDensity(self.mean[idx], self.covariance[np.ix_(idx, idx)])

    def scaled(self, factor: float) -> "GaussianDensity":
        """Same mean, covariance multiplied by ``factor``."""
        return GaussianDensity(self.mean, self.covariance * factor)

    def to_dict(self) -> Dict[str, Any]:
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist()}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "GaussianDensity":
        return cls(np.asarray(payload["mean"], dtype=float), np.asarray(payload["covariance"], dtype=float))


@dataclass(frozen=True)
class CategoricalPosterior:
    """Posterior probabilities over a finite set of models."""

    probabilities: np.ndarray

    def __post_init__(self) -> None:
        p = np.atleast_1d(np.asarray(self.probabilities, dtype=float))
        if p.ndim != 1:
            raise DimensionMismatchError("probabilities must be a vector")
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if p.size and abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {p.sum():.15g}, not 1")
        object.__setattr__(self, "probabilities", p)

    @property
    def k(self) -> int:
        return int(self.probabilities.size)


class FreeEnergy(NamedTuple):
    """A free energy with its accuracy and complexity terms."""

    value: float
    accuracy: float
    complexity: float


def cholesky(matrix: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, adding ``1e-10 * trace/d`` jitter once if needed."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    try:
        return linalg.cholesky(matrix, lower=True)
    except linalg.LinAlgError:
        pass
    d = matrix.shape[0]
    jitter = JITTER * float(np.trace(matrix)) / d
    if not np.isfinite(jitter) or jitter <= 0:
        raise DegenerateDensityError("matrix is not positive definite and cannot be jittered")
    logger.debug("Adding jitter %.3g to %dx%d matrix", jitter, d, d)
    try:
        return linalg.cholesky(matrix + jitter * np.eye(d), lower=True)
    except linalg.LinAlgError as e:
        raise DegenerateDensityError("matrix is not positive definite after jitter") from e


def log_det(matrix: np.ndarray) -> float:
    """Log-determinant of a symmetric positive definite matrix."""
    if np.size(matrix) == 0:
        return 0.0
    factor = cholesky(matrix)
    return 2.0 * float(np.sum(np.log(np.diag(factor))))


def inverse_spd(matrix: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix via its Cholesky factor."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.size == 0:
        return matrix.copy()
    factor = cholesky(matrix)
    inv = linalg.cho_solve((factor, True), np.eye(matrix.shape[0]))
    return 0.5 * (inv + inv.T)


def neg_entropy(g: GaussianDensity) -> float:
    """Negative differential entropy, -0.5 ln|2 pi e Sigma|."""
    return -0.5 * (g.dim * LOG_2PI_E + log_det(g.covariance))


def kl_gaussian(q: GaussianDensity, p: GaussianDensity) -> float:
    """KL divergence KL(q || p) between two multivariate normals."""
    if q.dim != p.dim:
        raise DimensionMismatchError(f"dimension mismatch: {q.dim} vs {p.dim}")
    if q.dim == 0:
        return 0.0
    p_factor = cholesky(p.covariance)
    diff = p.mean - q.mean
    trace_term = float(np.trace(linalg.cho_solve((p_factor, True), q.covariance)))
    quad_term = float(diff @ linalg.cho_solve((p_factor, True), diff))
    logdet_p = 2.0 * float(np.sum(np.log(np.diag(p_factor))))
    return 0.5 * (trace_term + quad_term - q.dim + logdet_p - log_det(q.covariance))


def kl_categorical(p: CategoricalPosterior) -> float:
    """KL divergence from the uniform prior over ``k`` models to ``p``."""
    if p.k == 0:
        raise ValueError("KL divergence over zero models is undefined")
    return float(np.sum(xlogy(p.probabilities, p.probabilities)) + np.log(p.k))


def log_bayes_factor(f1: float, f2: float) -> float:
    """Log Bayes factor of model 1 over model 2 from their free energies."""
    return f1 - f2


def prob_from_nats(delta: float) -> float:
    """Posterior probability of the favoured model given a log Bayes factor."""
    return float(expit(delta))


def posterior_over_models(free_energies: Sequence[float]) -> CategoricalPosterior:
    """Posterior model probabilities under a flat prior (softmax of the evidence)."""
    f = np.asarray(free_energies, dtype=float)
    if f.size == 0:
        raise ValueError("at least one free energy is required")
    if not np.all(np.isfinite(f)):
        raise ValueError("free energies must be finite")
    p = softmax(f - f.max())
    return CategoricalPosterior(p / p.sum())


def evidence_label(delta: float) -> str:
    """Verbal strength of a log Bayes factor (natural-log scale)."""
    magnitude = abs(delta)
    if magnitude < 1.0:
        return "weak"
    if magnitude < 3.0:
        return "positive"
    if magnitude < 5.0:
        return "strong"
    return "very strong"


def bayesian_model_average(
    densities: Sequence[GaussianDensity], free_energies: Sequence[float]
) -> GaussianDensity:
    """Moment-matched mixture of densities weighted by posterior model probability."""
    if not densities:
        raise ValueError("at least one density is required")
    weights = posterior_over_models(free_energies).probabilities
    mean = sum(w * d.mean for w, d in zip(weights, densities))
    second = sum(w * (d.covariance + np.outer(d.mean, d.mean)) for w, d in zip(weights, densities))
    cov = second - np.outer(mean, mean)
    cov = 0.5 * (cov + cov.T)
    # clear rounding noise on dimensions fixed in every model
    cov[np.abs(cov) < 1e-15] = 0.0
    return GaussianDensity(mean, cov)
