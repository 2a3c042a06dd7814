"""Variational Laplace inversion of a subject's model.

The posterior over parameters is Gaussian, the per-region noise log-precisions
get their own Gaussian posterior and the free energy is the accuracy of the
fit minus the KL complexity of both posteriors. Parameters are updated by a
damped Gauss-Newton step; a step that lowers F is rejected and the damping
doubled, so accepted free energies never decrease.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from bdcomp.core.config import PriorConfig, VLConfig
from bdcomp.core.dcm import DcmSpec, InputSchedule, integrate_batch
from bdcomp.core.exceptions import (
    DimensionMismatchError,
    DivergedModelError,
    FitFailureError,
    InconsistentSubjectsError,
)
from bdcomp.core.information import FreeEnergy, GaussianDensity, inverse_spd, kl_gaussian
from bdcomp.core.priors import ParameterLayout, PriorSpec, default_priors, labels_to_indices

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2 * np.pi))
LAMBDA_STEP_LIMIT = 2.0


class ForwardModel:
    """A map from a parameter vector to predictions of shape (n_samples, n_channels)."""

    def predict(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict_batch(self, thetas: np.ndarray) -> np.ndarray:
        """Predictions for each row of ``thetas``; rows that diverge are NaN."""
        out = []
        for theta in thetas:
            try:
                out.append(self.predict(theta))
            except DivergedModelError:
                out.append(None)
        shape = next((y.shape for y in out if y is not None), None)
        if shape is None:
            raise DivergedModelError("every parameter set diverged", step_index=-1)
        return np.stack([np.full(shape, np.nan) if y is None else y for y in out])


class LinearForwardModel(ForwardModel):
    """Predictions linear in the parameters: y[t, r] = sum_p design[t, r, p] theta[p]."""

    def __init__(self, design: np.ndarray):
        design = np.asarray(design, dtype=float)
        if design.ndim == 2:
            design = design[:, np.newaxis, :]
        if design.ndim != 3:
            raise DimensionMismatchError("design must have shape (samples, [channels,] parameters)")
        self.design = design

    def predict(self, theta: np.ndarray) -> np.ndarray:
        return np.einsum("trp,p->tr", self.design, np.asarray(theta, dtype=float))

    def predict_batch(self, thetas: np.ndarray) -> np.ndarray:
        return np.einsum("trp,bp->btr", self.design, np.asarray(thetas, dtype=float))


class DcmForwardModel(ForwardModel):
    """Mean-centred DCM predictions for a fixed spec and input schedule."""

    def __init__(
        self,
        spec: DcmSpec,
        inputs: InputSchedule,
        layout: Optional[ParameterLayout] = None,
        center: bool = True,
    ):
        self.spec = spec
        self.inputs = inputs
        self.layout = layout or ParameterLayout.from_spec(spec)
        self.center = center

    def predict_batch(self, thetas: np.ndarray) -> np.ndarray:
        y, _ = integrate_batch(self.spec, self.layout.unpack(np.atleast_2d(thetas)), self.inputs)
        if self.center:
            y = y - y.mean(axis=1, keepdims=True)
        return y

    def predict(self, theta: np.ndarray) -> np.ndarray:
        y, first_bad = integrate_batch(self.spec, self.layout.unpack(np.atleast_2d(theta)), self.inputs)
        if first_bad[0] >= 0:
            step = int(first_bad[0])
            raise DivergedModelError(
                f"state became non-finite by step {step}", step_index=step, time=step * self.inputs.dt
            )
        y = y[0]
        return y - y.mean(axis=0) if self.center else y


def jacobian(
    model: ForwardModel, theta: np.ndarray, free: Sequence[int], steps: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Prediction at ``theta`` and its central-difference Jacobian over ``free``.

    All 2p+1 evaluations go through one ``predict_batch`` call. Returns
    ``g`` of shape (T, R) and ``J`` of shape (T, R, p).
    """
    theta = np.asarray(theta, dtype=float)
    free = np.asarray(free, dtype=int)
    steps = np.broadcast_to(np.asarray(steps, dtype=float), free.shape)
    p = free.size
    thetas = np.repeat(theta[np.newaxis], 2 * p + 1, axis=0)
    thetas[1 + np.arange(p), free] += steps
    thetas[1 + p + np.arange(p), free] -= steps
    y = model.predict_batch(thetas)
    if not np.all(np.isfinite(y)):
        raise DivergedModelError("forward model diverged while differentiating", step_index=-1)
    g = y[0]
    J = np.moveaxis((y[1 : p + 1] - y[p + 1 :]) / (2.0 * steps[:, np.newaxis, np.newaxis]), 0, -1)
    return g, J


def _sum_of_squares(residual: np.ndarray, J: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Expected squared error per channel under the Laplace approximation."""
    spread = np.einsum("trp,pq,trq->r", J, sigma, J) if J.shape[-1] else 0.0
    return np.sum(residual**2, axis=0) + spread


def _expected_precision(lam: GaussianDensity) -> np.ndarray:
    """E[exp(lambda)] per channel for Gaussian log-precisions."""
    return np.exp(lam.mean + 0.5 * lam.variances)


def _accuracy(ss: np.ndarray, n_samples: int, lam: GaussianDensity) -> float:
    """Expected Gaussian log-likelihood given the per-channel sums of squares."""
    w = _expected_precision(lam)
    return float(np.sum(-0.5 * w * ss + 0.5 * n_samples * lam.mean - 0.5 * n_samples * LOG_2PI))


def _complexity(
    mu: np.ndarray, sigma: np.ndarray, lam: GaussianDensity, priors: PriorSpec
) -> float:
    """KL divergence of the free-parameter and log-precision posteriors from their priors."""
    free = priors.free_indices
    lam_free = priors.free_lambda_indices
    theta_q = GaussianDensity(mu[free], sigma)
    lambda_q = lam.restrict(lam_free)
    return kl_gaussian(theta_q, priors.theta_prior.restrict(free)) + kl_gaussian(
        lambda_q, priors.lambda_prior.restrict(lam_free)
    )


def _optimise_lambda(
    ss: np.ndarray, n_samples: int, start: GaussianDensity, prior: GaussianDensity, n_steps: int
) -> GaussianDensity:
    """Newton ascent on the log-precisions with the parameters held fixed."""
    free = np.flatnonzero(prior.variances > 0)
    mean = prior.mean.copy()
    cov = np.zeros((prior.dim, prior.dim))
    if free.size == 0:
        return GaussianDensity(mean, cov)
    p0 = inverse_spd(prior.covariance[np.ix_(free, free)])
    eta = prior.mean[free]
    ss_f = ss[free]
    m = start.mean[free].copy()
    var = start.variances[free]
    sigma = np.diag(var)
    for _ in range(n_steps):
        curvature = 0.5 * np.exp(m + 0.5 * var) * ss_f
        grad = -curvature + 0.5 * n_samples - p0 @ (m - eta)
        delta = np.linalg.solve(np.diag(curvature) + p0, grad)
        delta = np.clip(delta, -LAMBDA_STEP_LIMIT, LAMBDA_STEP_LIMIT)
        m = m + delta
        sigma = inverse_spd(p0 + np.diag(0.5 * np.exp(m + 0.5 * var) * ss_f))
        var = np.diag(sigma).copy()
        if np.max(np.abs(delta)) < 1e-8:
            break
    mean[free] = m
    cov[np.ix_(free, free)] = sigma
    return GaussianDensity(mean, cov)


def free_energy(
    model: ForwardModel,
    data: np.ndarray,
    q: GaussianDensity,
    lambda_q: GaussianDensity,
    priors: PriorSpec,
    fd_step: float = 1e-3,
) -> FreeEnergy:
    """Free energy of a given pair of posteriors, split into accuracy and complexity."""
    data = np.atleast_2d(np.asarray(data, dtype=float).T).T
    free = priors.free_indices
    if q.dim != priors.theta_prior.dim or lambda_q.dim != priors.lambda_prior.dim:
        raise DimensionMismatchError("posteriors and priors have different dimensions")
    if free.size:
        steps = fd_step * np.sqrt(priors.theta_prior.variances[free])
        g, J = jacobian(model, q.mean, free, steps)
    else:
        g, J = model.predict(q.mean), np.zeros(data.shape + (0,))
    sigma = q.covariance[np.ix_(free, free)]
    ss = _sum_of_squares(data - g, J, sigma)
    accuracy = _accuracy(ss, data.shape[0], lambda_q)
    complexity = _complexity(q.mean, sigma, lambda_q, priors)
    return FreeEnergy(accuracy - complexity, accuracy, complexity)


@dataclass
class SubjectPosterior:
    """Outcome of inverting one subject's model."""

    theta_post: GaussianDensity
    lambda_post: GaussianDensity
    free_energy: float
    accuracy: float
    complexity: float
    n_iterations: int
    converged: bool
    labels: List[str]
    theta_prior: GaussianDensity
    lambda_prior: GaussianDensity
    subject_id: str = ""
    data_offset: Optional[np.ndarray] = None
    history: List[float] = field(default_factory=list)
    damping: List[float] = field(default_factory=list)
    settings: Dict[str, Any] = field(default_factory=dict)

    @property
    def priors(self) -> PriorSpec:
        return PriorSpec(self.theta_prior, self.lambda_prior)

    def label_indices(self, labels: Sequence[str]) -> np.ndarray:
        return labels_to_indices(self.labels, labels)

    def with_priors(
        self, theta_prior: GaussianDensity, theta_post: GaussianDensity, delta_f: float
    ) -> "SubjectPosterior":
        """Copy under a reduced parameter prior, with F shifted by ``delta_f``."""
        priors = PriorSpec(theta_prior, self.lambda_prior)
        free = priors.free_indices
        complexity = _complexity(
            theta_post.mean, theta_post.covariance[np.ix_(free, free)], self.lambda_post, priors
        )
        value = self.free_energy + delta_f
        return SubjectPosterior(
            theta_post=theta_post,
            lambda_post=self.lambda_post,
            free_energy=value,
            accuracy=value + complexity,
            complexity=complexity,
            n_iterations=self.n_iterations,
            converged=self.converged,
            labels=list(self.labels),
            theta_prior=theta_prior,
            lambda_prior=self.lambda_prior,
            subject_id=self.subject_id,
            data_offset=self.data_offset,
            history=list(self.history),
            damping=list(self.damping),
            settings=dict(self.settings),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "subject_id": self.subject_id,
            "labels": list(self.labels),
            "free_energy": self.free_energy,
            "accuracy": self.accuracy,
            "complexity": self.complexity,
            "n_iterations": self.n_iterations,
            "converged": self.converged,
            "theta_post": self.theta_post.to_dict(),
            "lambda_post": self.lambda_post.to_dict(),
            "theta_prior": self.theta_prior.to_dict(),
            "lambda_prior": self.lambda_prior.to_dict(),
            "data_offset": None if self.data_offset is None else self.data_offset.tolist(),
            "history": list(self.history),
            "damping": list(self.damping),
            "settings": dict(self.settings),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "SubjectPosterior":
        offset = payload.get("data_offset")
        return cls(
            theta_post=GaussianDensity.from_dict(payload["theta_post"]),
            lambda_post=GaussianDensity.from_dict(payload["lambda_post"]),
            free_energy=float(payload["free_energy"]),
            accuracy=float(payload["accuracy"]),
            complexity=float(payload["complexity"]),
            n_iterations=int(payload["n_iterations"]),
            converged=bool(payload["converged"]),
            labels=list(payload["labels"]),
            theta_prior=GaussianDensity.from_dict(payload["theta_prior"]),
            lambda_prior=GaussianDensity.from_dict(payload["lambda_prior"]),
            subject_id=payload.get("subject_id", ""),
            data_offset=None if offset is None else np.asarray(offset, dtype=float),
            history=[float(x) for x in payload.get("history", [])],
            damping=[float(x) for x in payload.get("damping", [])],
            settings=dict(payload.get("settings", {})),
        )


@dataclass
class _Point:
    """A candidate posterior mean with everything the next Gauss-Newton step needs."""

    mu: np.ndarray
    residual: np.ndarray
    J: np.ndarray
    lam: GaussianDensity
    sigma: np.ndarray
    gram: np.ndarray
    energy: FreeEnergy


def _evaluate(
    model: ForwardModel,
    data: np.ndarray,
    mu: np.ndarray,
    priors: PriorSpec,
    p0: np.ndarray,
    steps: np.ndarray,
    lam_start: GaussianDensity,
    config: VLConfig,
) -> _Point:
    """Linearise at ``mu`` and settle the noise and parameter covariances there."""
    free = priors.free_indices
    g, J = jacobian(model, mu, free, steps)
    residual = data - g
    n_samples = data.shape[0]
    # alternate the noise and parameter covariances to a joint fixed point
    lam = lam_start
    sigma = inverse_spd(p0) if free.size else np.zeros((0, 0))
    for _ in range(4):
        ss = _sum_of_squares(residual, J, sigma)
        lam = _optimise_lambda(ss, n_samples, lam, priors.lambda_prior, config.lambda_newton_steps)
        w = _expected_precision(lam)
        gram = np.einsum("trp,r,trq->pq", J, w, J)
        sigma = inverse_spd(gram + p0) if free.size else np.zeros((0, 0))
    ss = _sum_of_squares(residual, J, sigma)
    accuracy = _accuracy(ss, n_samples, lam)
    complexity = _complexity(mu, sigma, lam, priors)
    energy = FreeEnergy(accuracy - complexity, accuracy, complexity)
    return _Point(mu, residual, J, lam, sigma, gram, energy)


def invert(
    model: ForwardModel,
    data: np.ndarray,
    priors: PriorSpec,
    config: Optional[VLConfig] = None,
    labels: Optional[Sequence[str]] = None,
) -> SubjectPosterior:
    """Variational Laplace on an arbitrary forward model."""
    config = config or VLConfig()
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, np.newaxis]
    if priors.lambda_prior.dim != data.shape[1]:
        raise DimensionMismatchError(
            f"data has {data.shape[1]} channels but the noise prior has {priors.lambda_prior.dim}"
        )
    prior = priors.theta_prior
    free = priors.free_indices
    labels = list(labels) if labels is not None else [f"theta.{i}" for i in range(prior.dim)]
    if len(labels) != prior.dim:
        raise InconsistentSubjectsError("one label per parameter is required")
    p0 = inverse_spd(prior.covariance[np.ix_(free, free)]) if free.size else np.zeros((0, 0))
    steps = config.fd_step * np.sqrt(prior.variances[free])
    settings = config.model_dump()

    try:
        best = _evaluate(model, data, prior.mean.copy(), priors, p0, steps, priors.lambda_prior, config)
    except DivergedModelError as e:
        raise FitFailureError(f"forward model diverged at the prior mean: {e}", float("nan"), 0) from e

    history = [best.energy.value]
    damping_trace = [config.initial_damping]
    damping = config.initial_damping
    quiet = 0
    converged = free.size == 0
    iteration = 1
    last_diverged = False
    while not converged and iteration < config.max_iterations:
        iteration += 1
        w = _expected_precision(best.lam)
        gradient = np.einsum("trp,r,tr->p", best.J, w, best.residual)
        gradient -= p0 @ (best.mu[free] - prior.mean[free])
        step = np.linalg.solve(best.gram + (1.0 + damping) * p0, gradient)
        mu = best.mu.copy()
        mu[free] += step
        try:
            candidate: Optional[_Point] = _evaluate(model, data, mu, priors, p0, steps, best.lam, config)
            last_diverged = False
        except DivergedModelError:
            candidate = None
            last_diverged = True

        if candidate is not None and candidate.energy.value >= best.energy.value:
            delta = candidate.energy.value - best.energy.value
            best = candidate
            history.append(best.energy.value)
            damping = damping / 2.0
            quiet = quiet + 1 if delta < config.tolerance else 0
            logger.debug(
                "VL %3d  F=%.4f  dF=%.3g  damping=%.3g", iteration, best.energy.value, delta, damping
            )
            if quiet >= config.patience:
                converged = True
        else:
            damping *= 2.0
            logger.debug("VL %3d  rejected step, damping=%.3g", iteration, damping)
            if damping > config.max_damping:
                if last_diverged:
                    raise FitFailureError(
                        "forward model keeps diverging at maximum damping", best.energy.value, iteration
                    )
                # no ascent direction left at any step size
                converged = (
                    candidate is not None
                    and abs(candidate.energy.value - best.energy.value) < config.tolerance
                )
                break
        damping_trace.append(damping)

    if not converged:
        logger.warning("VL stopped after %d iterations without converging", iteration)
    cov = np.zeros((prior.dim, prior.dim))
    cov[np.ix_(free, free)] = best.sigma
    return SubjectPosterior(
        theta_post=GaussianDensity(best.mu, cov),
        lambda_post=best.lam,
        free_energy=best.energy.value,
        accuracy=best.energy.accuracy,
        complexity=best.energy.complexity,
        n_iterations=iteration,
        converged=bool(converged),
        labels=labels,
        theta_prior=prior,
        lambda_prior=priors.lambda_prior,
        history=history,
        damping=damping_trace,
        settings=settings,
    )


def fit(
    spec: DcmSpec,
    inputs: InputSchedule,
    data: np.ndarray,
    priors: Optional[PriorSpec] = None,
    config: Optional[VLConfig] = None,
    prior_config: Optional[PriorConfig] = None,
    subject_id: str = "",
) -> SubjectPosterior:
    """Invert a DCM on one subject's (volumes x regions) timeseries."""
    data = np.asarray(data, dtype=float)
    if data.shape != (spec.n_volumes, spec.n_regions):
        raise DimensionMismatchError(
            f"data shape {data.shape} does not match ({spec.n_volumes}, {spec.n_regions})"
        )
    layout = ParameterLayout.from_spec(spec)
    priors = priors or default_priors(spec, prior_config)
    priors.check(layout)
    offset = data.mean(axis=0)
    model = DcmForwardModel(spec, inputs, layout, center=True)
    posterior = invert(model, data - offset, priors, config, labels=layout.labels)
    posterior.data_offset = offset
    posterior.subject_id = subject_id
    logger.info(
        "Fitted %s: F=%.3f after %d iterations (converged=%s)",
        subject_id or "subject",
        posterior.free_energy,
        posterior.n_iterations,
        posterior.converged,
    )
    return posterior
