"""Parametric empirical Bayes: a group GLM over subject-level posteriors.

Subject parameters are modelled as ``theta_i = X_i beta + e_i`` with
``e_i ~ N(0, Pi(gamma)^-1)`` and ``Pi = Q0 + sum_c exp(-gamma_c) Q_c``. The
subjects enter only through their priors and posteriors: every first-level
likelihood is recovered by Bayesian model reduction, so the group level
never refits a DCM.

For fixed ``gamma`` the conditional posterior over ``beta`` is Gaussian and
exact. ``gamma`` is updated by Newton steps on the free energy with
finite-difference curvature, and the two updates alternate until the free
energy settles.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from bdcomp.core.config import PebConfig
from bdcomp.core.exceptions import (
    DegenerateDensityError,
    DimensionMismatchError,
    InconsistentSubjectsError,
    ReductionInvalidError,
)
from bdcomp.core.information import GaussianDensity, inverse_spd, kl_gaussian
from bdcomp.core.inversion import SubjectPosterior
from bdcomp.core.reduction import reduce

logger = logging.getLogger(__name__)

GAMMA_FD_STEP = 1e-3
MAX_BACKTRACKS = 8


def build_design(n_subjects: int, n_params: int) -> np.ndarray:
    """Group-mean design: the identity stacked once per subject."""
    if n_subjects < 1 or n_params < 1:
        raise ValueError(f"design needs at least one subject and one parameter, got {n_subjects}x{n_params}")
    return np.kron(np.ones((n_subjects, 1)), np.eye(n_params))


def _component_list(q1: Union[np.ndarray, Sequence[np.ndarray]]) -> List[np.ndarray]:
    """A single M x M component or a stack of them, as a list."""
    q1 = np.asarray(q1, dtype=float)
    return [q1] if q1.ndim == 2 else list(q1)


def precision_block(
    gamma: Union[float, Sequence[float], np.ndarray],
    q0: np.ndarray,
    q1: Union[np.ndarray, Sequence[np.ndarray]],
) -> np.ndarray:
    """One subject's between-subject precision Q0 + sum_c exp(-gamma_c) Q_c."""
    q0 = np.asarray(q0, dtype=float)
    components = _component_list(q1)
    gammas = np.atleast_1d(np.asarray(gamma, dtype=float))
    if gammas.size != len(components):
        raise DimensionMismatchError(f"{gammas.size} gamma values for {len(components)} components")
    block = q0.copy()
    for g, q in zip(gammas, components):
        if q.shape != q0.shape:
            raise DimensionMismatchError(f"component shape {q.shape} does not match Q0 {q0.shape}")
        block = block + np.exp(-g) * q
    return block


def precision_matrix(
    gamma: Union[float, Sequence[float], np.ndarray],
    q0: np.ndarray,
    q1: Union[np.ndarray, Sequence[np.ndarray]],
    n_subjects: int,
) -> np.ndarray:
    """Block-diagonal between-subject precision I_N kron (Q0 + exp(-gamma) Q1)."""
    q0 = np.asarray(q0, dtype=float)
    if q0.ndim != 2 or q0.shape[0] != q0.shape[1]:
        raise DimensionMismatchError("Q0 must be square")
    for q in [q0] + _component_list(q1):
        if q.shape != q0.shape:
            raise DimensionMismatchError(f"component shape {q.shape} does not match Q0 {q0.shape}")
        if not np.allclose(q, q.T):
            raise ValueError("precision components must be symmetric")
        if q.size and np.linalg.eigvalsh(q)[0] < -1e-12 * max(1.0, float(np.abs(q).max())):
            raise ValueError("precision components must be positive semi-definite")
    if n_subjects < 1:
        raise ValueError("at least one subject is required")
    return np.kron(np.eye(n_subjects), precision_block(gamma, q0, q1))


@dataclass
class PebModel:
    """A fitted group GLM over one parameter subset."""

    labels: List[str]
    theta_stack: np.ndarray
    subject_covariances: np.ndarray
    design: np.ndarray
    q0: np.ndarray
    q1: np.ndarray
    beta_prior: GaussianDensity
    gamma_prior: GaussianDensity
    beta_post: GaussianDensity
    gamma_post: GaussianDensity
    free_energy: float
    accuracy: float
    complexity: float
    n_iterations: int = 0
    converged: bool = True
    switched_off: List[str] = field(default_factory=list)
    subject_ids: List[str] = field(default_factory=list)
    component_labels: List[List[str]] = field(default_factory=list)

    @property
    def n_subjects(self) -> int:
        return int(self.design.shape[0] // self.design.shape[1])

    @property
    def n_params(self) -> int:
        return len(self.labels)

    @property
    def active(self) -> np.ndarray:
        """Indices of parameters the group level estimates (non-zero beta prior variance)."""
        return np.flatnonzero(self.beta_prior.variances > 0)

    def precision_block(self, gamma: Optional[np.ndarray] = None) -> np.ndarray:
        """Between-subject precision over the active parameters."""
        act = self.active
        gamma = self.gamma_post.mean if gamma is None else gamma
        q0 = self.q0[np.ix_(act, act)]
        q1 = [q[np.ix_(act, act)] for q in self.q1]
        return precision_block(gamma, q0, q1)

    def empirical_prior(self) -> GaussianDensity:
        """Group-level prior for a subject: N(mu_beta, Sigma_beta + Pi(mu_gamma)^-1)."""
        act = self.active
        mean = np.zeros(self.n_params)
        cov = np.zeros((self.n_params, self.n_params))
        x1 = self.design[: self.n_params]
        full_mean = x1 @ self.beta_post.mean
        mean[act] = full_mean[act]
        if act.size:
            block = self.beta_post.covariance[np.ix_(act, act)] + inverse_spd(self.precision_block())
            cov[np.ix_(act, act)] = block
        return GaussianDensity(mean, cov)

    def parameter_precisions(self) -> Dict[str, float]:
        """Posterior precision 1/var of each estimated group parameter."""
        variances = self.beta_post.variances
        return {self.labels[i]: float(1.0 / variances[i]) for i in self.active}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "labels": list(self.labels),
            "subject_ids": list(self.subject_ids),
            "switched_off": list(self.switched_off),
            "component_labels": [list(c) for c in self.component_labels],
            "free_energy": self.free_energy,
            "accuracy": self.accuracy,
            "complexity": self.complexity,
            "n_iterations": self.n_iterations,
            "converged": self.converged,
            "theta_stack": self.theta_stack.tolist(),
            "subject_covariances": self.subject_covariances.tolist(),
            "design": self.design.tolist(),
            "q0": self.q0.tolist(),
            "q1": self.q1.tolist(),
            "beta_prior": self.beta_prior.to_dict(),
            "gamma_prior": self.gamma_prior.to_dict(),
            "beta_post": self.beta_post.to_dict(),
            "gamma_post": self.gamma_post.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "PebModel":
        return cls(
            labels=list(payload["labels"]),
            theta_stack=np.asarray(payload["theta_stack"], dtype=float),
            subject_covariances=np.asarray(payload["subject_covariances"], dtype=float),
            design=np.asarray(payload["design"], dtype=float),
            q0=np.asarray(payload["q0"], dtype=float),
            q1=np.asarray(payload["q1"], dtype=float),
            beta_prior=GaussianDensity.from_dict(payload["beta_prior"]),
            gamma_prior=GaussianDensity.from_dict(payload["gamma_prior"]),
            beta_post=GaussianDensity.from_dict(payload["beta_post"]),
            gamma_post=GaussianDensity.from_dict(payload["gamma_post"]),
            free_energy=float(payload["free_energy"]),
            accuracy=float(payload["accuracy"]),
            complexity=float(payload["complexity"]),
            n_iterations=int(payload.get("n_iterations", 0)),
            converged=bool(payload.get("converged", True)),
            switched_off=list(payload.get("switched_off", [])),
            subject_ids=list(payload.get("subject_ids", [])),
            component_labels=[list(c) for c in payload.get("component_labels", [])],
        )


class _GroupProblem:
    """Quantities of one PEB fit restricted to the active parameters."""

    def __init__(
        self,
        priors: List[GaussianDensity],
        posteriors: List[GaussianDensity],
        free_energies: List[float],
        blocks: List[np.ndarray],
        q0: np.ndarray,
        components: List[np.ndarray],
        beta_prior: GaussianDensity,
        gamma_prior: GaussianDensity,
    ):
        self.priors = priors
        self.posteriors = posteriors
        self.free_energies = free_energies
        self.blocks = blocks
        self.q0 = q0
        self.components = components
        self.beta_prior = beta_prior
        self.gamma_prior = gamma_prior
        self.beta_p0 = inverse_spd(beta_prior.covariance)
        self.gamma_p0 = inverse_spd(gamma_prior.covariance)
        # first-level likelihoods in precision form
        self.likelihood: List[Tuple[np.ndarray, np.ndarray]] = []
        for prior, post in zip(priors, posteriors):
            p = inverse_spd(post.covariance)
            p0 = inverse_spd(prior.covariance)
            self.likelihood.append((p - p0, p @ post.mean - p0 @ prior.mean))

    def precision(self, gamma: np.ndarray) -> np.ndarray:
        """Between-subject precision block Pi(gamma) over the active parameters."""
        return precision_block(gamma, self.q0, self.components)

    def conditional_beta(self, gamma: np.ndarray) -> GaussianDensity:
        """Exact posterior over beta for fixed gamma."""
        r = self.precision(gamma)
        precision = self.beta_p0.copy()
        target = self.beta_p0 @ self.beta_prior.mean
        for (lam, h), x in zip(self.likelihood, self.blocks):
            a = inverse_spd(lam + r)
            s = r - r @ a @ r
            b = r @ a @ h
            precision += x.T @ s @ x
            target += x.T @ b
        cov = inverse_spd(precision)
        return GaussianDensity(cov @ target, cov)

    def expected_reduction(self, beta: GaussianDensity, gamma: np.ndarray) -> float:
        """Sum over subjects of the expected log-evidence change under the group prior."""
        r = self.precision(gamma)
        try:
            r_cov = inverse_spd(r)
        except DegenerateDensityError as e:
            raise ReductionInvalidError("between-subject precision is singular") from e
        total = 0.0
        for (lam, _), prior, post, x in zip(self.likelihood, self.priors, self.posteriors, self.blocks):
            _, delta_f = reduce(prior, post, GaussianDensity(x @ beta.mean, r_cov))
            s = r - r @ inverse_spd(lam + r) @ r
            total += delta_f - 0.5 * float(np.trace(beta.covariance @ x.T @ s @ x))
        return total

    def objective(self, beta: GaussianDensity, gamma: np.ndarray) -> float:
        """Expected reduction plus the log prior on gamma; what the gamma update climbs."""
        diff = gamma - self.gamma_prior.mean
        return self.expected_reduction(beta, gamma) - 0.5 * float(diff @ self.gamma_p0 @ diff)

    def curvature(self, beta: GaussianDensity, gamma: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Central-difference gradient and Hessian of the expected reduction in gamma."""
        k = gamma.size
        h = GAMMA_FD_STEP
        f0 = self.expected_reduction(beta, gamma)
        grad = np.zeros(k)
        hess = np.zeros((k, k))
        shifted: Dict[Tuple[int, int], float] = {}

        def at(i: int, si: int, j: int = -1, sj: int = 0) -> float:
            key = (i * 3 + si + 1, j * 3 + sj + 1)
            if key not in shifted:
                g = gamma.copy()
                g[i] += si * h
                if j >= 0:
                    g[j] += sj * h
                shifted[key] = self.expected_reduction(beta, g)
            return shifted[key]

        for i in range(k):
            fp, fm = at(i, 1), at(i, -1)
            grad[i] = (fp - fm) / (2 * h)
            hess[i, i] = (fp - 2 * f0 + fm) / h**2
            for j in range(i):
                value = (at(i, 1, j, 1) - at(i, 1, j, -1) - at(i, -1, j, 1) + at(i, -1, j, -1)) / (4 * h**2)
                hess[i, j] = hess[j, i] = value
        return grad, hess

    def update_gamma(self, beta: GaussianDensity, gamma: np.ndarray) -> np.ndarray:
        """One safeguarded Newton step on gamma."""
        grad, hess = self.curvature(beta, gamma)
        grad = grad - self.gamma_p0 @ (gamma - self.gamma_prior.mean)
        neg = -(hess - self.gamma_p0)
        eigenvalues = np.linalg.eigvalsh(neg)
        if eigenvalues[0] <= 0:
            neg = neg + (abs(eigenvalues[0]) + 1.0) * np.eye(gamma.size)
        step = np.linalg.solve(neg, grad)
        current = self.objective(beta, gamma)
        for _ in range(MAX_BACKTRACKS):
            candidate = gamma + step
            try:
                if self.objective(beta, candidate) >= current:
                    return candidate
            except ReductionInvalidError:
                pass
            step = step / 2.0
        return gamma

    def gamma_covariance(self, beta: GaussianDensity, gamma: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Laplace covariance of gamma from the curvature, clipped to stay positive definite."""
        _, hess = self.curvature(beta, gamma)
        eigenvalues, vectors = np.linalg.eigh(-hess)
        clipped = (vectors * np.clip(eigenvalues, 0.0, None)) @ vectors.T
        return inverse_spd(clipped + self.gamma_p0), hess

    def evaluate(self, gamma: np.ndarray) -> Tuple[GaussianDensity, GaussianDensity, float, float]:
        """Posteriors at gamma with the free energy's accuracy and complexity."""
        beta = self.conditional_beta(gamma)
        gamma_cov, hess = self.gamma_covariance(beta, gamma)
        gamma_q = GaussianDensity(gamma, gamma_cov)
        accuracy = (
            float(np.sum(self.free_energies))
            + self.expected_reduction(beta, gamma)
            + 0.5 * float(np.trace(gamma_cov @ hess))
        )
        complexity = kl_gaussian(beta, self.beta_prior) + kl_gaussian(gamma_q, self.gamma_prior)
        return beta, gamma_q, accuracy, complexity


def _components(
    labels: List[str], active: np.ndarray, groups: Optional[List[List[str]]]
) -> List[List[int]]:
    """Indices of each precision component.

    Labelled groups keep their active members; active parameters left over form
    one extra component. Without groups every active parameter shares one.
    """
    if not groups:
        return [list(active)]
    index = {label: i for i, label in enumerate(labels)}
    seen: List[int] = []
    out: List[List[int]] = []
    for group in groups:
        missing = [label for label in group if label not in index]
        if missing:
            raise InconsistentSubjectsError(f"component labels not in the subset: {', '.join(missing)}")
        members = [index[label] for label in group if index[label] in active]
        if members:
            out.append(members)
            seen.extend(members)
    rest = [i for i in active if i not in seen]
    if rest:
        out.append(rest)
    return out


@dataclass
class _Prepared:
    """Validated inputs of one fit: the reduced problem and the full-size matrices."""

    problem: _GroupProblem
    labels: List[str]
    indices: np.ndarray
    active: np.ndarray
    design: np.ndarray
    groups: List[List[int]]
    q0: np.ndarray
    q1: np.ndarray


def _prepare(
    subjects: Sequence[SubjectPosterior],
    labels: Sequence[str],
    config: PebConfig,
    reference_prior: Optional[GaussianDensity],
) -> _Prepared:
    """Check the subjects, restrict them to the estimated parameters and build Q0 and Q1.

    Parameters with zero reference prior variance are fixed at zero and left out
    of the group problem. Q0 is ``q0_scale`` on the active diagonal; each Q1
    component is ``precision_ratio`` times the reference prior precisions of
    its members.
    """
    labels = list(labels)
    if not subjects:
        raise InconsistentSubjectsError("at least one subject is required")
    if not labels:
        raise InconsistentSubjectsError("the parameter subset is empty")
    if len(set(labels)) != len(labels):
        raise InconsistentSubjectsError("parameter labels must be unique")
    reference_labels = subjects[0].labels
    for subject in subjects:
        if subject.labels != reference_labels:
            raise InconsistentSubjectsError(
                f"subject {subject.subject_id or '?'} has a different parameterization"
            )
    idx = subjects[0].label_indices(labels)
    m = len(labels)

    if reference_prior is None:
        reference = subjects[0].theta_prior.restrict(idx)
    elif reference_prior.dim == len(reference_labels):
        reference = reference_prior.restrict(idx)
    elif reference_prior.dim == m:
        reference = reference_prior
    else:
        raise DimensionMismatchError("reference prior matches neither the subjects nor the subset")
    active = np.flatnonzero(reference.variances > 0)
    if active.size == 0:
        raise InconsistentSubjectsError("no parameter in the subset has prior variance")

    priors, posteriors = [], []
    for subject in subjects:
        prior = subject.theta_prior.restrict(idx)
        post = subject.theta_post.restrict(idx)
        if np.any(prior.variances[active] <= 0) or np.any(post.variances[active] <= 0):
            raise InconsistentSubjectsError(
                f"subject {subject.subject_id or '?'} fixes a parameter the group estimates"
            )
        priors.append(prior.restrict(active))
        posteriors.append(post.restrict(active))

    n = len(subjects)
    design = build_design(n, m)
    blocks = [design[i * m : (i + 1) * m][np.ix_(active, active)] for i in range(n)]

    groups = _components(labels, active, config.components)
    q0 = np.zeros((m, m))
    q0[active, active] = config.q0_scale
    q1 = np.zeros((len(groups), m, m))
    for c, members in enumerate(groups):
        q1[c, members, members] = config.precision_ratio / reference.variances[members]

    k = len(groups)
    problem = _GroupProblem(
        priors,
        posteriors,
        [s.free_energy for s in subjects],
        blocks,
        q0[np.ix_(active, active)],
        [q[np.ix_(active, active)] for q in q1],
        GaussianDensity(np.zeros(active.size), reference.covariance[np.ix_(active, active)]),
        GaussianDensity(np.full(k, config.gamma_prior_mean), np.eye(k) * config.gamma_prior_var),
    )
    return _Prepared(problem, labels, idx, active, design, groups, q0, q1)


def _expand(density: GaussianDensity, active: np.ndarray, m: int) -> GaussianDensity:
    """Embed a density over the active parameters into all m, with zeros elsewhere."""
    mean = np.zeros(m)
    cov = np.zeros((m, m))
    mean[active] = density.mean
    cov[np.ix_(active, active)] = density.covariance
    return GaussianDensity(mean, cov)


def conditional_beta(
    subjects: Sequence[SubjectPosterior],
    labels: Sequence[str],
    gamma: Union[float, Sequence[float], np.ndarray],
    config: Optional[PebConfig] = None,
    reference_prior: Optional[GaussianDensity] = None,
) -> GaussianDensity:
    """Exact posterior over the group parameters for a fixed gamma."""
    prepared = _prepare(subjects, labels, config or PebConfig(), reference_prior)
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    beta = prepared.problem.conditional_beta(gamma)
    return _expand(beta, prepared.active, len(prepared.labels))


def fit_peb(
    subjects: Sequence[SubjectPosterior],
    labels: Sequence[str],
    config: Optional[PebConfig] = None,
    reference_prior: Optional[GaussianDensity] = None,
) -> PebModel:
    """Fit the group-mean GLM to a parameter subset of every subject.

    ``reference_prior`` is a first-level prior over the subjects' full
    parameter vector (or over ``labels``); it sets the beta prior and the
    scale of the between-subject precision. It defaults to the first
    subject's prior. Q1 is ``config.precision_ratio`` times that prior's
    precisions, 16 by default rather than the bare prior precision.
    """
    config = config or PebConfig()
    prepared = _prepare(subjects, labels, config, reference_prior)
    problem = prepared.problem
    m = len(prepared.labels)

    gamma = problem.gamma_prior.mean.copy()
    previous = -np.inf
    converged = False
    iteration = 0
    beta_q, gamma_q, accuracy, complexity = problem.evaluate(gamma)
    for iteration in range(1, config.max_iterations + 1):
        gamma = problem.update_gamma(beta_q, gamma)
        beta_q, gamma_q, accuracy, complexity = problem.evaluate(gamma)
        value = accuracy - complexity
        logger.debug("PEB %3d  F=%.4f  gamma=%s", iteration, value, np.array2string(gamma, precision=3))
        if abs(value - previous) < config.tolerance:
            converged = True
            break
        previous = value
    if not converged:
        logger.warning("PEB stopped after %d iterations without converging", iteration)
    value = accuracy - complexity
    if not np.isfinite(value):
        raise DegenerateDensityError("group free energy is not finite")

    logger.info(
        "PEB over %d subjects and %d parameters: F=%.3f", len(subjects), prepared.active.size, value
    )
    idx = prepared.indices
    return PebModel(
        labels=prepared.labels,
        theta_stack=np.concatenate([s.theta_post.mean[idx] for s in subjects]),
        subject_covariances=np.stack([s.theta_post.covariance[np.ix_(idx, idx)] for s in subjects]),
        design=prepared.design,
        q0=prepared.q0,
        q1=prepared.q1,
        beta_prior=_expand(problem.beta_prior, prepared.active, m),
        gamma_prior=problem.gamma_prior,
        beta_post=_expand(beta_q, prepared.active, m),
        gamma_post=gamma_q,
        free_energy=float(value),
        accuracy=float(accuracy),
        complexity=float(complexity),
        n_iterations=iteration,
        converged=converged,
        subject_ids=[s.subject_id for s in subjects],
        component_labels=[[prepared.labels[j] for j in members] for members in prepared.groups],
    )
