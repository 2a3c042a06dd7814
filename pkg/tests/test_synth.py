"""Tests for synthetic cohort generation."""

import numpy as np
import pytest
from scipy.stats import truncnorm

from bdcomp.core.config import DatasetNoise, SynthConfig
from bdcomp.core.dcm import default_microtime, integrate
from bdcomp.core.exceptions import CohortGenerationError, InputError
from bdcomp.core.priors import ParameterLayout
from bdcomp.core.synth import (
    TRUNCATION,
    GroundTruth,
    TruthConfig,
    default_scenario,
    generate_cohort,
    generate_default_cohort,
    sample_subject,
    truth_from_dict,
)


class TestDefaultScenario:
    """Test cases for the default three-region scenario."""

    def test_structure(self, small_synth_config):
        """Test regions, inputs and the acquisition length."""
        spec, inputs, truth = default_scenario(small_synth_config)
        assert spec.region_names == ["V1", "PHC_L", "PHC_R"]
        assert spec.input_names == ["stimuli", "scenes"]
        assert spec.n_volumes == 40
        assert inputs.u.shape[0] == 2
        assert inputs.u[0].max() == 1.0

    def test_two_modulations_are_zero(self, small_synth_config):
        """Test that the ground truth has exactly two absent self-connection modulations."""
        spec, _, truth = default_scenario(small_synth_config)
        layout = ParameterLayout.from_spec(spec)
        theta = layout.pack(truth.group_mean)
        b_values = [theta[layout.index(label)] for label in layout.field_labels("B")]
        assert len(b_values) == 6
        assert sum(value == 0.0 for value in b_values) == 2

    def test_between_subject_sd_on_connections_only(self, small_synth_config):
        """Test that self-connections and haemodynamics do not vary across subjects."""
        spec, _, truth = default_scenario(small_synth_config)
        layout = ParameterLayout.from_spec(spec)
        sd = dict(zip(layout.labels, truth.between_subject_sd))
        assert sd["A.PHC_L.V1"] == pytest.approx(0.1)
        assert sd["B.scenes.V1.V1"] == pytest.approx(0.1)
        assert sd["A.self.V1"] == 0.0
        assert sd["C.V1.stimuli"] == 0.0
        assert sd["H.decay.V1"] == 0.0


class TestSampleSubject:
    """Test cases for subject-level parameter sampling."""

    def test_deviation_statistics(self, small_synth_config):
        """Test that deviations have the configured spread."""
        spec, _, truth = default_scenario(small_synth_config)
        layout = ParameterLayout.from_spec(spec)
        i = layout.index("A.PHC_L.V1")
        values = np.array([sample_subject(layout, truth, 0, s)[i] for s in range(2000)])
        expected_sd = 0.1 * truncnorm.std(-TRUNCATION, TRUNCATION)
        assert values.mean() == pytest.approx(0.4, abs=0.01)
        assert values.std() == pytest.approx(expected_sd, rel=0.1)
        assert np.all(np.abs(values - 0.4) <= 0.1 * TRUNCATION + 1e-12)

    def test_disabled_slots_stay_zero(self, small_synth_config):
        """Test that masked parameters are never sampled."""
        spec, _, truth = default_scenario(small_synth_config)
        layout = ParameterLayout.from_spec(spec)
        theta = sample_subject(layout, truth, 1, 0)
        np.testing.assert_array_equal(theta[~layout.enabled], 0.0)

    def test_seeded(self, small_synth_config):
        """Test that the subject index and seed fix the draw."""
        spec, _, truth = default_scenario(small_synth_config)
        layout = ParameterLayout.from_spec(spec)
        np.testing.assert_array_equal(sample_subject(layout, truth, 3, 1), sample_subject(layout, truth, 3, 1))
        assert not np.array_equal(sample_subject(layout, truth, 3, 1), sample_subject(layout, truth, 3, 2))


class TestGenerateCohort:
    """Test cases for generate_cohort."""

    def test_deterministic(self, small_synth_config):
        """Test that one seed gives bit-identical cohorts."""
        first, truth_a = generate_default_cohort(small_synth_config, seed=3)
        second, truth_b = generate_default_cohort(small_synth_config, seed=3)
        for a, b in zip(first, second):
            for sa, sb in zip(a.subjects, b.subjects):
                np.testing.assert_array_equal(sa.data, sb.data)
        np.testing.assert_array_equal(truth_a.group_mean, truth_b.group_mean)

    def test_seed_changes_cohort(self, small_synth_config):
        """Test that another seed gives other data."""
        first, _ = generate_default_cohort(small_synth_config, seed=3)
        second, _ = generate_default_cohort(small_synth_config, seed=4)
        assert not np.array_equal(first[0].subjects[0].data, second[0].subjects[0].data)

    def test_datasets_share_subjects(self, small_synth_config):
        """Test that datasets differ only in noise."""
        config = small_synth_config.model_copy(
            update={"datasets": [DatasetNoise(label="a", noise_sd=0.0), DatasetNoise(label="b", noise_sd=0.0)]}
        )
        bundles, _ = generate_default_cohort(config, seed=0)
        for sa, sb in zip(bundles[0].subjects, bundles[1].subjects):
            np.testing.assert_array_equal(sa.data, sb.data)

    def test_noise_level(self, small_synth_config):
        """Test that the difference from a noiseless copy has the configured SD."""
        config = small_synth_config.model_copy(
            update={"datasets": [DatasetNoise(label="clean", noise_sd=0.0), DatasetNoise(label="noisy", noise_sd=0.2)]}
        )
        bundles, _ = generate_default_cohort(config, seed=0)
        residuals = np.concatenate(
            [(b.data - a.data).ravel() for a, b in zip(bundles[0].subjects, bundles[1].subjects)]
        )
        assert residuals.std() == pytest.approx(0.2, rel=0.15)

    def test_no_between_subject_variability(self, small_synth_config):
        """Test that a zero SD gives identical subjects."""
        config = small_synth_config.model_copy(
            update={"between_subject_sd": 0.0, "datasets": [DatasetNoise(label="clean", noise_sd=0.0)]}
        )
        bundles, truth = generate_default_cohort(config, seed=0)
        subjects = bundles[0].subjects
        for other in subjects[1:]:
            np.testing.assert_array_equal(other.data, subjects[0].data)
        np.testing.assert_array_equal(truth.subject_params[0], truth.group_mean)

    def test_dataset_tr(self, small_synth_config):
        """Test that a dataset can be acquired at its own TR."""
        config = small_synth_config.model_copy(
            update={"datasets": [DatasetNoise(label="slow", noise_sd=0.1), DatasetNoise(label="fast", noise_sd=0.1, tr=1.4)]}
        )
        bundles, _ = generate_default_cohort(config, seed=0)
        fast = bundles[1].subjects[0]
        assert fast.spec.tr == 1.4
        assert fast.spec.n_volumes == 80
        assert fast.data.shape == (80, 3)

    def test_dataset_microtime_follows_tr(self, small_synth_config):
        """Test that every dataset integrates on a grid of its own TR/16 with the same blocks."""
        config = small_synth_config.model_copy(
            update={"datasets": [DatasetNoise(label="slow", noise_sd=0.0), DatasetNoise(label="fast", noise_sd=0.0, tr=1.4)]}
        )
        bundles, truth = generate_default_cohort(config, seed=0)
        for bundle in bundles:
            for subject in bundle.subjects:
                assert subject.inputs.dt == default_microtime(subject.spec.tr)
                assert subject.inputs.duration >= subject.spec.tr * subject.spec.n_volumes - 1e-9
        slow, fast = bundles[0].subjects[0], bundles[1].subjects[0]
        assert fast.inputs.blocks == slow.inputs.blocks
        on_time = pytest.approx(slow.inputs.u.sum() * slow.inputs.dt, abs=2 * fast.inputs.dt * len(fast.inputs.blocks))
        assert fast.inputs.u.sum() * fast.inputs.dt == on_time

        layout = ParameterLayout.from_spec(fast.spec)
        expected = integrate(fast.spec, layout.unpack(truth.subject_params[0]), fast.inputs)
        np.testing.assert_allclose(fast.data, expected)

    def test_subject_ids(self, small_synth_config):
        """Test subject naming and ground-truth bookkeeping."""
        bundles, truth = generate_default_cohort(small_synth_config, seed=0)
        assert [s.subject_id for s in bundles[0].subjects] == ["sub-01", "sub-02", "sub-03"]
        assert truth.subject_ids == ["sub-01", "sub-02", "sub-03"]
        assert truth.noise_sd == {"low": 0.05, "high": 0.4}
        value = truth.subject_value(1, "A.PHC_L.V1")
        assert value == truth.subject_params[1][truth.labels.index("A.PHC_L.V1")]

    def test_ground_truth_round_trip(self, small_synth_config):
        """Test that the ground truth survives to_dict and from_dict."""
        _, truth = generate_default_cohort(small_synth_config, seed=0)
        rebuilt = GroundTruth.from_dict(truth.to_dict())
        np.testing.assert_array_equal(rebuilt.group_mean, truth.group_mean)
        assert rebuilt.seed == 0
        assert rebuilt.labels == truth.labels

    def test_diverging_truth(self, two_region_spec, two_region_inputs):
        """Test that an explosive ground truth is refused."""
        truth = truth_from_dict(
            two_region_spec, {"group_mean": {"A.R1.R2": 20.0, "A.R2.R1": 20.0, "C.R1.u": 0.5}}, 0.0
        )
        with pytest.raises(CohortGenerationError):
            generate_cohort(two_region_spec, two_region_inputs, truth, 2, [DatasetNoise(label="a", noise_sd=0.1)], 0)

    @pytest.mark.parametrize(
        "n_subjects,datasets",
        [
            (1, [DatasetNoise(label="a", noise_sd=0.1)]),
            (3, []),
            (3, [DatasetNoise.model_construct(label="a", noise_sd=-1.0, tr=None)]),
        ],
    )
    def test_invalid_arguments(self, two_region_spec, two_region_inputs, n_subjects, datasets):
        """Test that impossible cohorts are rejected before simulating."""
        truth = truth_from_dict(two_region_spec, {}, 0.1)
        with pytest.raises(InputError):
            generate_cohort(two_region_spec, two_region_inputs, truth, n_subjects, datasets, 0)

    def test_negative_between_subject_sd(self, two_region_spec, two_region_inputs):
        """Test that negative SDs are rejected."""
        truth = truth_from_dict(two_region_spec, {}, 0.1)
        bad = TruthConfig(group_mean=truth.group_mean, between_subject_sd=-np.ones(truth.between_subject_sd.size))
        with pytest.raises(InputError):
            generate_cohort(two_region_spec, two_region_inputs, bad, 2, [DatasetNoise(label="a", noise_sd=0.1)], 0)


class TestTruthFromDict:
    """Test cases for custom ground truths."""

    def test_values_and_defaults(self, two_region_spec):
        """Test that given labels are set and the rest default."""
        truth = truth_from_dict(
            two_region_spec,
            {"group_mean": {"A.R2.R1": 0.3}, "between_subject_sd": {"C.R1.u": 0.05}},
            0.1,
        )
        layout = ParameterLayout.from_spec(two_region_spec)
        assert truth.group_mean.a[1, 0] == 0.3
        assert truth.between_subject_sd[layout.index("C.R1.u")] == 0.05
        assert truth.between_subject_sd[layout.index("A.R1.R2")] == 0.1
        assert truth.between_subject_sd[layout.index("H.decay.R1")] == 0.0

    def test_unknown_label(self, two_region_spec):
        """Test that an unknown label is an input error."""
        with pytest.raises(InputError):
            truth_from_dict(two_region_spec, {"group_mean": {"A.R9.R1": 0.3}}, 0.1)

    def test_bad_value(self, two_region_spec):
        """Test that a non-numeric value is an input error."""
        with pytest.raises(InputError):
            truth_from_dict(two_region_spec, {"group_mean": {"A.R2.R1": "strong"}}, 0.1)


class TestSynthConfig:
    """Test cases for SynthConfig validation."""

    def test_defaults(self):
        """Test the default scenario settings."""
        config = SynthConfig()
        assert config.n_subjects == 10
        assert [d.noise_sd for d in config.datasets] == [0.1, 0.2, 0.4]

    def test_duplicate_labels(self):
        """Test that dataset labels must be unique."""
        with pytest.raises(ValueError):
            SynthConfig(datasets=[DatasetNoise(label="a", noise_sd=0.1), DatasetNoise(label="a", noise_sd=0.2)])
