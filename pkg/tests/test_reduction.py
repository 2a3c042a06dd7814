"""Tests for Bayesian model reduction."""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from bdcomp.core.exceptions import ReductionInvalidError
from bdcomp.core.information import GaussianDensity
from bdcomp.core.reduction import ReducedModel, reduce, switch_off


def log_evidence(design, y, precision, prior: GaussianDensity) -> float:
    """Exact log evidence of a linear-Gaussian model."""
    cov = design @ prior.covariance @ design.T + np.eye(y.size) / precision
    return float(multivariate_normal(design @ prior.mean, cov).logpdf(y))


def posterior(design, y, precision, prior: GaussianDensity) -> GaussianDensity:
    """Exact posterior of a linear-Gaussian model over its free dimensions."""
    free = np.flatnonzero(prior.variances > 0)
    mean = prior.mean.copy()
    cov = np.zeros_like(prior.covariance)
    fixed_part = design @ mean - design[:, free] @ mean[free]
    p0 = np.linalg.inv(prior.covariance[np.ix_(free, free)])
    x = design[:, free]
    sigma = np.linalg.inv(precision * x.T @ x + p0)
    mean[free] = sigma @ (precision * x.T @ (y - fixed_part) + p0 @ prior.mean[free])
    cov[np.ix_(free, free)] = sigma
    return GaussianDensity(mean, 0.5 * (cov + cov.T))


def random_problem(seed: int):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 9))
    n = 30
    design = rng.standard_normal((n, d))
    a = rng.standard_normal((d, d)) * 0.3
    prior = GaussianDensity(rng.standard_normal(d) * 0.2, a @ a.T + np.eye(d) * 0.5)
    precision = float(rng.uniform(1.0, 10.0))
    y = design @ rng.standard_normal(d) + rng.standard_normal(n) / np.sqrt(precision)
    shrink = rng.uniform(0.05, 1.0, d)
    reduced_var = prior.variances * shrink
    reduced_var[rng.random(d) < 0.3] = 0.0
    reduced_mean = np.where(reduced_var > 0, rng.standard_normal(d) * 0.1, 0.0)
    reduced = GaussianDensity.from_variances(reduced_mean, reduced_var)
    return design, y, precision, prior, reduced


class TestReduce:
    """Test cases for reduce."""

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_exact_evidence_difference(self, seed):
        """Test that the evidence change equals the exact one for linear models."""
        design, y, precision, prior, reduced = random_problem(seed)
        full_post = posterior(design, y, precision, prior)

        reduced_post, delta_f = reduce(prior, full_post, reduced)

        expected = log_evidence(design, y, precision, reduced) - log_evidence(design, y, precision, prior)
        assert delta_f == pytest.approx(expected, abs=1e-6)
        if np.any(reduced.variances > 0):
            exact = posterior(design, y, precision, reduced)
            np.testing.assert_allclose(reduced_post.mean, exact.mean, atol=1e-8)
            np.testing.assert_allclose(reduced_post.covariance, exact.covariance, atol=1e-8)

    def test_switched_off_dimensions_are_fixed(self):
        """Test that switched-off dimensions get zero mean and variance."""
        design, y, precision, prior, _ = random_problem(7)
        full_post = posterior(design, y, precision, prior)
        reduced_post, _ = reduce(prior, full_post, switch_off(prior, [0]))
        assert reduced_post.mean[0] == 0.0
        assert np.all(reduced_post.covariance[0] == 0.0)

    def test_identity_reduction(self):
        """Test that reducing to the same prior changes nothing."""
        design, y, precision, prior, _ = random_problem(3)
        full_post = posterior(design, y, precision, prior)
        reduced_post, delta_f = reduce(prior, full_post, prior)
        assert delta_f == pytest.approx(0.0, abs=1e-9)
        np.testing.assert_allclose(reduced_post.mean, full_post.mean, atol=1e-9)

    def test_reductions_chain(self):
        """Test that reducing in two steps gives the same evidence as one step."""
        rng = np.random.default_rng(5)
        design = rng.standard_normal((30, 4))
        prior = GaussianDensity.from_variances(np.zeros(4), np.ones(4))
        y = design @ np.array([0.1, 0.0, 0.5, -0.3]) + rng.standard_normal(30) * 0.3
        full_post = posterior(design, y, 1 / 0.09, prior)
        r1 = switch_off(prior, [0])
        r2 = switch_off(prior, [0, 1])

        post1, delta1 = reduce(prior, full_post, r1)
        _, delta12 = reduce(r1, post1, r2)
        _, delta2 = reduce(prior, full_post, r2)

        assert delta1 + delta12 == pytest.approx(delta2, abs=1e-8)

    def test_indefinite_precision(self):
        """Test that a reduced prior broader than the data allows is rejected."""
        prior = GaussianDensity.from_variances([0.0], [1.0])
        full_post = GaussianDensity.from_variances([0.3], [2.0])
        with pytest.raises(ReductionInvalidError):
            reduce(prior, full_post, GaussianDensity.from_variances([0.0], [10.0]))

    def test_cannot_free_fixed_dimension(self):
        """Test that a reduced prior may not free a dimension the full model fixed."""
        prior = GaussianDensity.from_variances([0.0, 0.0], [0.0, 1.0])
        full_post = GaussianDensity.from_variances([0.0, 0.2], [0.0, 0.5])
        with pytest.raises(ReductionInvalidError):
            reduce(prior, full_post, GaussianDensity.from_variances([0.0, 0.0], [1.0, 1.0]))


class TestReducedModel:
    """Test cases for ReducedModel serialisation."""

    def test_to_dict(self):
        """Test that switched-off labels are listed in order."""
        g = GaussianDensity.from_variances([0.0], [1.0])
        model = ReducedModel(frozenset({"b", "a"}), g, -1.5, g)
        payload = model.to_dict()
        assert payload["switched_off"] == ["a", "b"]
        assert payload["delta_f"] == -1.5
