"""Pytest configuration and fixtures."""

import tempfile
from pathlib import Path
from typing import List

import numpy as np
import pytest

from bdcomp.core.compare import (
    MEASURES,
    ComparisonReport,
    DatasetResult,
    MeasureValues,
    ModelEntry,
    PairwiseTable,
    Provenance,
    Verdict,
    pairwise_probabilities,
)
from bdcomp.core.config import DatasetNoise, RunConfig, SynthConfig, VLConfig
from bdcomp.core.dcm import Block, DcmSpec, build_inputs, default_microtime
from bdcomp.core.information import GaussianDensity
from bdcomp.core.inversion import SubjectPosterior


@pytest.fixture
def temp_directory():
    """Provide a temporary directory for tests."""
    with tempfile.TemporaryDirectory() as temp_dir:
        yield Path(temp_dir)


@pytest.fixture
def two_region_spec():
    """Two regions, one input driving the first region, 40 volumes at TR 2 s."""
    return DcmSpec.create(
        ["R1", "R2"],
        ["u"],
        tr=2.0,
        n_volumes=40,
        c_mask=np.array([[1], [0]], dtype=bool),
    )


@pytest.fixture
def two_region_inputs(two_region_spec):
    """Alternating 10 s blocks covering the whole acquisition."""
    duration = two_region_spec.tr * two_region_spec.n_volumes
    blocks = [Block(0, float(onset), 10.0) for onset in np.arange(10.0, duration - 10.0 + 1e-9, 20.0)]
    return build_inputs(blocks, default_microtime(two_region_spec.tr), duration, n_inputs=1)


@pytest.fixture
def small_synth_config():
    """A cohort small enough to fit in seconds."""
    return SynthConfig(
        n_subjects=3,
        duration=112.0,
        datasets=[DatasetNoise(label="low", noise_sd=0.05), DatasetNoise(label="high", noise_sd=0.4)],
    )


@pytest.fixture
def quick_run_config(small_synth_config):
    """Run configuration with a loose VL tolerance and a single worker."""
    return RunConfig(
        jobs=1,
        synth=small_synth_config,
        vl=VLConfig(max_iterations=32, tolerance=0.1, patience=2),
    )


def make_subject(
    post_mean: np.ndarray,
    post_var: np.ndarray,
    prior_var: np.ndarray,
    labels: List[str],
    free_energy: float = 0.0,
    subject_id: str = "",
) -> SubjectPosterior:
    """A hand-built subject posterior with diagonal covariances and a zero-mean prior."""
    post_mean = np.asarray(post_mean, dtype=float)
    return SubjectPosterior(
        theta_post=GaussianDensity.from_variances(post_mean, post_var),
        lambda_post=GaussianDensity.from_variances([0.0], [0.01]),
        free_energy=free_energy,
        accuracy=free_energy,
        complexity=0.0,
        n_iterations=1,
        converged=True,
        labels=list(labels),
        theta_prior=GaussianDensity.from_variances(np.zeros(post_mean.size), prior_var),
        lambda_prior=GaussianDensity.from_variances([0.0], [1.0]),
        subject_id=subject_id,
    )


@pytest.fixture
def subject_factory():
    """Provide ``make_subject`` to tests that build group models by hand."""
    return make_subject


def pytest_configure(config):
    """Configure pytest markers."""
    config.addinivalue_line("markers", "integration: mark test as integration test")
    config.addinivalue_line("markers", "slow: mark test as slow running")


@pytest.fixture
def comparison_report():
    """A small hand-built report: two ranked datasets and one excluded."""
    low = MeasureValues(s_theta=3.0, s_epsilon=1.0, d_params=4.0, d_models=0.5)
    high = MeasureValues(s_theta=0.0, s_epsilon=0.0, d_params=0.0, d_models=0.0)
    datasets = [
        DatasetResult(
            label="low",
            status="ok",
            n_subjects=3,
            measures=low,
            relative=low,
            group_free_energy=-12.0,
            parameter_precisions={"B.u.R1.R1": 40.0},
            model_space=[ModelEntry(switched_off=[], delta_f=0.0, probability=1.0)],
        ),
        DatasetResult(
            label="high & noisy",
            status="ok",
            n_subjects=3,
            measures=high,
            relative=high,
            group_free_energy=-20.0,
            parameter_precisions={"B.u.R1.R1": 5.0},
            model_space=[ModelEntry(switched_off=["B.u.R1.R1"], delta_f=-1.0, probability=1.0)],
        ),
        DatasetResult(
            label="broken",
            status="excluded",
            reason="subject fit failed",
            n_subjects=3,
            failed_subjects=["sub-02"],
        ),
    ]
    pairwise = [
        PairwiseTable(
            measure=measure,
            labels=["low", "high & noisy"],
            probabilities=pairwise_probabilities([getattr(low, measure), getattr(high, measure)]),
        )
        for measure in MEASURES
    ]
    return ComparisonReport(
        provenance=Provenance(config_hash="ab" * 32, seed=7),
        interesting_parameters=["B.u.R1.R1"],
        pruned_parameters=[],
        datasets=datasets,
        pairwise=pairwise,
        verdict=Verdict(
            best="low",
            indistinguishable=False,
            first_places={"low": 4, "high & noisy": 0},
            margins={"s_theta": "strong (3.00 nats over high & noisy)"},
            statement="low is the most informative dataset (4 of 4 measures).",
        ),
    )
