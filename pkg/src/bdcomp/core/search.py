"""Model search over reduced group models and empirical Bayes for subjects."""

import logging
from collections import deque
from dataclasses import replace
from typing import Deque, FrozenSet, List, Optional, Set

import numpy as np

from bdcomp.core.config import SearchConfig
from bdcomp.core.exceptions import ReductionInvalidError
from bdcomp.core.information import GaussianDensity, kl_gaussian
from bdcomp.core.inversion import SubjectPosterior
from bdcomp.core.peb import PebModel
from bdcomp.core.reduction import ReducedModel, reduce, switch_off

logger = logging.getLogger(__name__)


def _group_complexity(beta_post: GaussianDensity, beta_prior: GaussianDensity, peb: PebModel) -> float:
    live = np.flatnonzero(beta_prior.variances > 0)
    return kl_gaussian(beta_post.restrict(live), beta_prior.restrict(live)) + kl_gaussian(
        peb.gamma_post, peb.gamma_prior
    )


def prune_greedy(peb: PebModel, config: Optional[SearchConfig] = None) -> PebModel:
    """Switch off group parameters one at a time while the evidence keeps rising.

    Each pass removes the parameter whose removal most increases the free
    energy; among removals within ``tie_tolerance`` of the best, the lowest
    index wins. Returns the input unchanged when no removal helps.
    """
    config = config or SearchConfig()
    off: Set[int] = {peb.labels.index(label) for label in peb.switched_off}
    current = 0.0
    while True:
        candidates = [int(i) for i in peb.active if i not in off]
        gains = []
        for k in candidates:
            try:
                _, delta_f = reduce(peb.beta_prior, peb.beta_post, switch_off(peb.beta_prior, off | {k}))
                gains.append(delta_f - current)
            except ReductionInvalidError:
                gains.append(-np.inf)
        if not gains or max(gains) <= 0:
            break
        best = max(gains)
        choice = next(k for k, g in zip(candidates, gains) if g >= best - config.tie_tolerance)
        off.add(choice)
        current += gains[candidates.index(choice)]
        logger.info("Pruned %s (dF=%.3f)", peb.labels[choice], gains[candidates.index(choice)])

    newly_off = off - {peb.labels.index(label) for label in peb.switched_off}
    if not newly_off:
        return peb
    prior = switch_off(peb.beta_prior, off)
    post, delta_f = reduce(peb.beta_prior, peb.beta_post, prior)
    value = peb.free_energy + delta_f
    complexity = _group_complexity(post, prior, peb)
    return replace(
        peb,
        beta_prior=prior,
        beta_post=post,
        free_energy=value,
        accuracy=value + complexity,
        complexity=complexity,
        switched_off=[peb.labels[i] for i in sorted(off)],
    )


def empirical_bayes_update(subject: SubjectPosterior, group: PebModel) -> SubjectPosterior:
    """Re-estimate a subject under the group's empirical priors.

    Parameters in the group's subset get the group-level prior (zero for
    pruned ones); every other parameter keeps its first-level prior.
    """
    idx = subject.label_indices(group.labels)
    empirical = group.empirical_prior()
    mean = subject.theta_prior.mean.copy()
    cov = subject.theta_prior.covariance.copy()
    cov[idx, :] = 0.0
    cov[:, idx] = 0.0
    cov[np.ix_(idx, idx)] = empirical.covariance
    mean[idx] = empirical.mean
    # parameters fixed at the first level stay fixed whatever the group says
    fixed = subject.theta_prior.variances == 0
    mean[fixed] = subject.theta_prior.mean[fixed]
    cov[fixed, :] = 0.0
    cov[:, fixed] = 0.0
    reduced_prior = GaussianDensity(mean, cov)
    post, delta_f = reduce(subject.theta_prior, subject.theta_post, reduced_prior)
    return subject.with_priors(reduced_prior, post, delta_f)


def build_model_space(
    peb: PebModel, threshold: float = 3.0, cap: int = 64
) -> List[ReducedModel]:
    """Breadth-first family of reduced models around ``peb``.

    Starts from ``peb`` itself, switches off one more free parameter at a
    time and keeps a candidate when its evidence relative to the start
    exceeds ``-threshold``. Kept candidates are expanded in turn; sets are
    visited once and the search stops at ``cap`` models.
    """
    start: FrozenSet[int] = frozenset(peb.labels.index(label) for label in peb.switched_off)
    models = [
        ReducedModel(
            switched_off=frozenset(peb.switched_off),
            reduced_prior=peb.beta_prior,
            delta_f=0.0,
            reduced_posterior=peb.beta_post,
        )
    ]
    free = [int(i) for i in peb.active]
    queue: Deque[FrozenSet[int]] = deque([start])
    seen: Set[FrozenSet[int]] = {start}
    while queue and len(models) < cap:
        off = queue.popleft()
        for k in free:
            if k in off:
                continue
            candidate = off | {k}
            if candidate in seen:
                continue
            seen.add(candidate)
            prior = switch_off(peb.beta_prior, candidate)
            try:
                post, delta_f = reduce(peb.beta_prior, peb.beta_post, prior)
            except ReductionInvalidError:
                continue
            if delta_f > -threshold:
                models.append(
                    ReducedModel(
                        switched_off=frozenset(peb.labels[i] for i in candidate),
                        reduced_prior=prior,
                        delta_f=delta_f,
                        reduced_posterior=post,
                    )
                )
                queue.append(candidate)
                if len(models) >= cap:
                    break
    logger.info("Model space: %d models within %.1f nats", len(models), threshold)
    return models
