"""Tests for cohort, posterior and report files."""

import json

import numpy as np
import pytest

from bdcomp.core.compare import Provenance, compare_posteriors
from bdcomp.core.config import RunConfig
from bdcomp.core.exceptions import InputError
from bdcomp.core.io import (
    MANIFEST,
    load_cohort,
    load_ground_truth,
    load_json,
    load_posterior,
    load_posteriors,
    load_report,
    read_timeseries,
    save_cohort,
    save_json,
    save_posterior,
    save_posteriors,
    save_report,
    write_timeseries,
)
from bdcomp.core.synth import generate_default_cohort
from tests.conftest import make_subject

PROVENANCE = Provenance(config_hash="0" * 64, seed=4)
LABELS = ["B.u.R1.R1", "B.u.R2.R2"]


class TestJson:
    """Test cases for JSON helpers."""

    def test_malformed_json_reports_position(self, temp_directory):
        """Test that syntax errors name the file, line and column."""
        path = temp_directory / "bad.json"
        path.write_text('{\n  "a": 1,\n  oops\n}\n')
        with pytest.raises(InputError, match=r"bad\.json:3:3"):
            load_json(path)

    def test_missing_file(self, temp_directory):
        """Test that a missing file is an input error."""
        with pytest.raises(InputError):
            load_json(temp_directory / "absent.json")

    def test_provenance_is_stamped(self, temp_directory):
        """Test that saved documents carry provenance."""
        path = save_json(temp_directory / "sub" / "doc.json", {"x": 0.1}, PROVENANCE)
        payload = json.loads(path.read_text())
        assert payload["x"] == 0.1
        assert payload["provenance"]["seed"] == 4
        assert payload["provenance"]["tool"] == "bdcomp"


class TestTimeseries:
    """Test cases for timeseries CSV files."""

    def test_values_read_back_exactly(self, temp_directory):
        """Test that 17 significant digits preserve every float."""
        data = np.random.default_rng(0).standard_normal((12, 3)) / 3.0
        path = write_timeseries(temp_directory / "s.csv", data, ["V1", "PHC_L", "PHC_R"], PROVENANCE)
        np.testing.assert_array_equal(read_timeseries(path, ["V1", "PHC_L", "PHC_R"]), data)

    def test_header_and_comments(self, temp_directory):
        """Test the provenance comments and the region header."""
        path = write_timeseries(temp_directory / "s.csv", np.zeros((2, 2)), ["R1", "R2"], PROVENANCE)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# tool: bdcomp")
        assert "R1,R2" in lines

    def test_wrong_regions(self, temp_directory):
        """Test that a header naming other regions is rejected."""
        path = write_timeseries(temp_directory / "s.csv", np.zeros((2, 2)), ["R1", "R2"])
        with pytest.raises(InputError):
            read_timeseries(path, ["R2", "R1"])

    def test_missing_values(self, temp_directory):
        """Test that gaps in the data are rejected."""
        path = temp_directory / "s.csv"
        path.write_text("R1,R2\n0.1,0.2\n0.3,\n")
        with pytest.raises(InputError):
            read_timeseries(path)

    def test_missing_file(self, temp_directory):
        """Test that a missing timeseries is an input error."""
        with pytest.raises(InputError):
            read_timeseries(temp_directory / "none.csv")


class TestCohortFiles:
    """Test cases for saving and loading cohorts."""

    def test_round_trip(self, temp_directory, small_synth_config):
        """Test that a saved cohort loads back unchanged."""
        bundles, truth = generate_default_cohort(small_synth_config, seed=1)
        save_cohort(temp_directory, bundles, PROVENANCE, truth)
        loaded = load_cohort(temp_directory)
        assert [b.label for b in loaded] == ["low", "high"]
        for original, restored in zip(bundles, loaded):
            for a, b in zip(original.subjects, restored.subjects):
                assert a.subject_id == b.subject_id
                np.testing.assert_array_equal(a.data, b.data)
                np.testing.assert_array_equal(a.inputs.u, b.inputs.u)
                assert b.spec.region_names == a.spec.region_names
        np.testing.assert_array_equal(load_ground_truth(temp_directory).group_mean, truth.group_mean)

    def test_missing_manifest(self, temp_directory):
        """Test that a directory without a manifest is not a cohort."""
        with pytest.raises(InputError):
            load_cohort(temp_directory)

    def test_malformed_manifest(self, temp_directory):
        """Test that a manifest without datasets is rejected."""
        (temp_directory / MANIFEST).write_text('{"sets": []}')
        with pytest.raises(InputError):
            load_cohort(temp_directory)


class TestPosteriorFiles:
    """Test cases for saving and loading posteriors."""

    def test_single_posterior(self, temp_directory):
        """Test that one posterior survives a save and load."""
        subject = make_subject([0.1, 0.2], [0.01, 0.02], [1.0, 1.0], LABELS, -12.5, "sub-01")
        path = save_posterior(temp_directory / "p.json", subject, PROVENANCE)
        loaded = load_posterior(path)
        np.testing.assert_array_equal(loaded.theta_post.covariance, subject.theta_post.covariance)
        assert loaded.free_energy == -12.5

    def test_not_a_posterior(self, temp_directory):
        """Test that another JSON document is rejected."""
        path = save_json(temp_directory / "p.json", {"x": 1})
        with pytest.raises(InputError):
            load_posterior(path)

    def test_manifest_records_failures(self, temp_directory):
        """Test that failed subjects come back as None with their IDs."""
        ok = make_subject([0.1, 0.2], [0.01, 0.02], [1.0, 1.0], LABELS, subject_id="sub-01")
        results = {
            "low": [("sub-01", ok, None), ("sub-02", None, "diverged")],
            "high": [("sub-01", ok, None), ("sub-02", ok, None)],
        }
        save_posteriors(temp_directory, results, PROVENANCE)
        posteriors, failures = load_posteriors(temp_directory)
        assert list(posteriors) == ["low", "high"]
        assert posteriors["low"][1] is None
        assert failures == {"low": ["sub-02"], "high": []}
        assert not (temp_directory / "low" / "sub-02.json").exists()
        manifest = json.loads((temp_directory / MANIFEST).read_text())
        assert manifest["datasets"][0]["failures"] == {"sub-02": "diverged"}


class TestReportFiles:
    """Test cases for saving and loading reports."""

    def test_round_trip(self, temp_directory):
        """Test that a report loads back equal to the one saved."""
        subjects = [
            make_subject([0.3 + 0.01 * i, -0.3], [0.05, 0.05], [1.0, 1.0], LABELS, subject_id=f"s{i}")
            for i in range(4)
        ]
        report = compare_posteriors({"a": subjects, "b": subjects}, RunConfig())
        path = save_report(temp_directory / "report.json", report)
        assert load_report(path).model_dump() == report.model_dump()

    def test_not_a_report(self, temp_directory):
        """Test that another document is rejected."""
        path = save_json(temp_directory / "report.json", {"x": 1})
        with pytest.raises(InputError):
            load_report(path)
