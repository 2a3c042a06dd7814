"""Bayesian model reduction for Gaussian priors and posteriors.

Given a full model's prior and posterior, the evidence and posterior under
any other Gaussian prior follow in closed form. Dimensions whose prior
variance is exactly zero are handled as the analytic limit: they are
conditioned out rather than given tiny variances.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, FrozenSet, Sequence, Tuple

import numpy as np
from scipy import linalg

from bdcomp.core.exceptions import (
    DegenerateDensityError,
    DimensionMismatchError,
    ReductionInvalidError,
)
from bdcomp.core.information import GaussianDensity, inverse_spd, log_det

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2 * np.pi))


@dataclass
class ReducedModel:
    """A reduced model: which parameters are off, its prior, posterior and evidence change."""

    switched_off: FrozenSet[str]
    reduced_prior: GaussianDensity
    delta_f: float
    reduced_posterior: GaussianDensity

    def to_dict(self) -> Dict[str, Any]:
        return {
            "switched_off": sorted(self.switched_off),
            "delta_f": self.delta_f,
            "reduced_prior": self.reduced_prior.to_dict(),
            "reduced_posterior": self.reduced_posterior.to_dict(),
        }


def switch_off(prior: GaussianDensity, indices: Sequence[int]) -> GaussianDensity:
    """Copy of ``prior`` with the given dimensions fixed at zero."""
    idx = np.asarray(list(indices), dtype=int)
    mean = prior.mean.copy()
    cov = prior.covariance.copy()
    mean[idx] = 0.0
    cov[idx, :] = 0.0
    cov[:, idx] = 0.0
    return GaussianDensity(mean, cov)


def _condition(
    g: GaussianDensity, given: np.ndarray, keep: np.ndarray, value: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, float]:
    """Condition ``g`` on x[given] = value; return the kept mean, covariance and log density."""
    c_gg = g.covariance[np.ix_(given, given)]
    c_kg = g.covariance[np.ix_(keep, given)]
    c_kk = g.covariance[np.ix_(keep, keep)]
    diff = value - g.mean[given]
    try:
        factor = linalg.cho_factor(c_gg, lower=True)
    except linalg.LinAlgError as e:
        raise ReductionInvalidError("cannot condition on a degenerate block") from e
    solved = linalg.cho_solve(factor, diff)
    gain = linalg.cho_solve(factor, c_kg.T).T
    mean = g.mean[keep] + c_kg @ solved
    cov = c_kk - gain @ c_kg.T
    log_density = -0.5 * (given.size * LOG_2PI + log_det(c_gg) + float(diff @ solved))
    return mean, 0.5 * (cov + cov.T), log_density


def _precision(cov: np.ndarray, what: str) -> np.ndarray:
    try:
        return inverse_spd(cov)
    except DegenerateDensityError as e:
        raise ReductionInvalidError(f"{what} covariance is singular") from e


def reduce(
    full_prior: GaussianDensity,
    full_posterior: GaussianDensity,
    reduced_prior: GaussianDensity,
) -> Tuple[GaussianDensity, float]:
    """Posterior and log-evidence change when ``full_prior`` is replaced by ``reduced_prior``.

    Returns ``(reduced_posterior, delta_f)`` where ``delta_f`` is
    ln p(y | reduced) - ln p(y | full).

    Raises:
        ReductionInvalidError: the reduced posterior precision is not positive
            definite, or the reduced prior frees a dimension the full model fixed.
    """
    d = full_prior.dim
    if full_posterior.dim != d or reduced_prior.dim != d:
        raise DimensionMismatchError(
            f"dimensions differ: prior {d}, posterior {full_posterior.dim}, reduced {reduced_prior.dim}"
        )
    fixed = full_prior.variances == 0
    if np.any(reduced_prior.variances[fixed] != 0) or np.any(
        reduced_prior.mean[fixed] != full_prior.mean[fixed]
    ):
        raise ReductionInvalidError("reduced prior differs from the full prior on fixed dimensions")

    off = np.flatnonzero(~fixed & (reduced_prior.variances == 0))
    keep = np.flatnonzero(~fixed & (reduced_prior.variances > 0))
    live = np.flatnonzero(~fixed)

    mean = full_prior.mean.copy()
    cov = np.zeros((d, d))
    mean[off] = reduced_prior.mean[off]
    if keep.size == 0 and off.size == 0:
        return GaussianDensity(mean, cov), 0.0

    # restrict to the live dimensions, then condition out the newly fixed ones
    prior_live = full_prior.restrict(live)
    post_live = full_posterior.restrict(live)
    pos_off = np.searchsorted(live, off)
    pos_keep = np.searchsorted(live, keep)
    if off.size:
        eta, c0, log_prior_off = _condition(prior_live, pos_off, pos_keep, reduced_prior.mean[off])
        mu, c, log_post_off = _condition(post_live, pos_off, pos_keep, reduced_prior.mean[off])
        delta_f = log_post_off - log_prior_off
    else:
        eta, c0 = prior_live.mean, prior_live.covariance
        mu, c = post_live.mean, post_live.covariance
        delta_f = 0.0

    if keep.size:
        p = _precision(c, "posterior")
        p0 = _precision(c0, "prior")
        nu = reduced_prior.mean[keep]
        r = _precision(reduced_prior.covariance[np.ix_(keep, keep)], "reduced prior")
        pr = p - p0 + r
        pr = 0.5 * (pr + pr.T)
        if np.linalg.eigvalsh(pr)[0] <= 0:
            raise ReductionInvalidError("reduced posterior precision is not positive definite")
        sr = inverse_spd(pr)
        mr = sr @ (p @ mu - p0 @ eta + r @ nu)
        delta_f += 0.5 * (log_det(p) - log_det(p0) + log_det(r) - log_det(pr))
        delta_f -= 0.5 * float(mu @ p @ mu + nu @ r @ nu - eta @ p0 @ eta - mr @ pr @ mr)
        mean[keep] = mr
        cov[np.ix_(keep, keep)] = sr

    if not np.isfinite(delta_f):
        raise ReductionInvalidError("reduced log evidence is not finite")
    return GaussianDensity(mean, cov), float(delta_f)

