"""Tests for report rendering."""

import json
import xml.etree.ElementTree as ET

import pytest

from bdcomp.core.io import save_report
from bdcomp.docs.generator import FORMATS, ReportGenerator, dump_schema, export_report, report_schema

SVG = "{http://www.w3.org/2000/svg}"


class TestReportGenerator:
    """Test cases for ReportGenerator."""

    def test_generator_initialization(self, comparison_report, temp_directory):
        """Test generator initialization."""
        generator = ReportGenerator(comparison_report, temp_directory)
        assert generator.report is comparison_report
        assert generator.output_dir == temp_directory
        assert "nats" in generator.jinja_env.filters

    def test_generate_all(self, comparison_report, temp_directory):
        """Test that JSON, Markdown and SVG files are written."""
        written = ReportGenerator(comparison_report, temp_directory).generate_all()
        assert [p.name for p in written] == ["report.json", "report.md", "report.svg"]
        assert all(p.exists() for p in written)
        payload = json.loads((temp_directory / "report.json").read_text())
        assert payload["verdict"]["best"] == "low"

    def test_generate_all_without_svg(self, comparison_report, temp_directory):
        """Test that the figure can be skipped."""
        ReportGenerator(comparison_report, temp_directory).generate_all(svg=False)
        assert not (temp_directory / "report.svg").exists()
        assert (temp_directory / "report.md").exists()

    def test_render_markdown(self, comparison_report, temp_directory):
        """Test the Markdown summary."""
        text = ReportGenerator(comparison_report, temp_directory).render_markdown()
        assert text.startswith("# Bayesian data comparison")
        assert "low is the most informative dataset" in text
        assert "| low | 3.00 | 1.00 | 4.00 | 0.50 |" in text
        assert "| Dataset | Parameter certainty |" in text
        assert "Excluded from the ranking: subject fit failed." in text
        assert "Failed subjects: sub-02." in text
        assert "| B.u.R1.R1 | 40 | 5 |" in text
        assert "`" + "ab" * 32 + "`" in text

    def test_pairwise_percentages(self, comparison_report, temp_directory):
        """Test that pairwise tables are rendered as percentages."""
        text = ReportGenerator(comparison_report, temp_directory).render_markdown()
        assert "| low | 50.0% | 95.3% |" in text

    def test_render_html(self, comparison_report, temp_directory):
        """Test that the HTML rendering contains real tables."""
        html = ReportGenerator(comparison_report, temp_directory).render_html()
        assert html.startswith("<!DOCTYPE html>")
        assert "<table>" in html
        assert "<h1>Bayesian data comparison</h1>" in html

    def test_render_svg(self, comparison_report, temp_directory):
        """Test that the figure is valid SVG with one panel per measure."""
        svg = ReportGenerator(comparison_report, temp_directory).render_svg()
        root = ET.fromstring(svg.encode("utf-8"))
        panels = root.findall(f"{SVG}g")
        assert len(panels) == 4
        for panel in panels:
            assert len(panel.findall(f"{SVG}rect")) == 2
        titles = [t.text for t in root.iter(f"{SVG}title")]
        assert "high &amp; noisy: 0.00 nats" not in titles
        assert "high & noisy: 0.00 nats" in titles
        assert "seed=7" in svg

    def test_worst_dataset_has_no_bar(self, comparison_report, temp_directory):
        """Test that bars are drawn relative to the worst dataset."""
        svg = ReportGenerator(comparison_report, temp_directory).render_svg()
        root = ET.fromstring(svg.encode("utf-8"))
        first_panel = root.findall(f"{SVG}g")[0]
        heights = [float(r.get("height")) for r in first_panel.findall(f"{SVG}rect")]
        assert heights[0] > 0
        assert heights[1] == 0.0

    def test_export_unsupported_format(self, comparison_report, temp_directory):
        """Test export with an unsupported format."""
        generator = ReportGenerator(comparison_report, temp_directory)
        with pytest.raises(ValueError, match="Unsupported export format"):
            generator.export("pdf", temp_directory / "report.pdf")

    @pytest.mark.parametrize("format", FORMATS)
    def test_export_formats(self, comparison_report, temp_directory, format):
        """Test that every supported format can be exported."""
        target = temp_directory / "out" / f"report.{format}"
        path = ReportGenerator(comparison_report, temp_directory).export(format, target)
        assert path == target
        assert target.read_text()


class TestExportReport:
    """Test cases for re-rendering saved reports."""

    def test_from_report_file(self, comparison_report, temp_directory):
        """Test loading a generator from report.json."""
        path = save_report(temp_directory / "report.json", comparison_report)
        generator = ReportGenerator.from_report_file(path)
        assert generator.output_dir == temp_directory
        assert generator.report.verdict.best == "low"

    def test_default_output_is_sibling(self, comparison_report, temp_directory):
        """Test that the output defaults to report.<suffix> next to the input."""
        path = save_report(temp_directory / "report.json", comparison_report)
        assert export_report(path, "svg") == temp_directory / "report.svg"
        assert export_report(path, "markdown") == temp_directory / "report.md"
        assert (temp_directory / "report.svg").exists()

    def test_json_onto_itself(self, comparison_report, temp_directory):
        """Test that exporting JSON over its own source leaves it alone."""
        path = save_report(temp_directory / "report.json", comparison_report)
        before = path.read_text()
        export_report(path, "json")
        assert path.read_text() == before

    def test_unknown_format(self, comparison_report, temp_directory):
        """Test that an unknown format is rejected."""
        path = save_report(temp_directory / "report.json", comparison_report)
        with pytest.raises(ValueError):
            export_report(path, "docx")


class TestSchema:
    """Test cases for the report schema."""

    def test_schema_properties(self):
        """Test the top-level fields of the schema."""
        schema = report_schema()
        assert {"provenance", "datasets", "pairwise", "verdict"} <= set(schema["properties"])

    def test_dump_schema_is_json(self):
        """Test that the dumped schema parses."""
        assert json.loads(dump_schema())["title"] == "ComparisonReport"
