"""Report rendering for Bayesian data comparison results."""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import markdown
from jinja2 import Environment, FileSystemLoader, Template

from bdcomp.core.compare import MEASURE_TITLES, ComparisonReport
from bdcomp.core.io import load_report

logger = logging.getLogger(__name__)

FORMATS = ("json", "markdown", "html", "svg")
SUFFIXES = {"json": ".json", "markdown": ".md", "html": ".html", "svg": ".svg"}

PANEL_WIDTH = 240
PANEL_HEIGHT = 260
PANEL_GAP = 20
PLOT_TOP = 50
PLOT_HEIGHT = 160
BAR_COLORS = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"]


class ReportGenerator:
    """Turns a comparison report into files people can read."""

    def __init__(self, report: ComparisonReport, output_dir: Path):
        self.report = report
        self.output_dir = Path(output_dir)

        template_dir = Path(__file__).parent.parent / "templates"
        self.jinja_env = Environment(
            loader=FileSystemLoader(str(template_dir)),
            trim_blocks=True,
            lstrip_blocks=True,
        )
        self.jinja_env.filters["nats"] = lambda value: f"{value:.2f}"
        self.jinja_env.filters["percent"] = lambda value: f"{100 * value:.1f}%"

    @classmethod
    def from_report_file(cls, report_file: Path, output_dir: Optional[Path] = None) -> "ReportGenerator":
        """Create a generator from a saved ``report.json``."""
        report_file = Path(report_file)
        return cls(load_report(report_file), output_dir or report_file.parent)

    def generate_all(self, svg: bool = True) -> List[Path]:
        """Write report.json, report.md and (optionally) report.svg."""
        formats = ["json", "markdown"] + (["svg"] if svg else [])
        return [self.export(fmt, self.output_dir / f"report{SUFFIXES[fmt]}") for fmt in formats]

    def render_json(self) -> str:
        return self.report.model_dump_json(indent=2) + "\n"

    def render_markdown(self) -> str:
        template = self._get_template("report.md.j2")
        return template.render(
            report=self.report,
            titles=MEASURE_TITLES,
            ranked=self.report.ranked(),
            precision_rows=self._precision_rows(),
        )

    def render_html(self) -> str:
        body = markdown.markdown(self.render_markdown(), extensions=["tables"])
        return (
            "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n"
            "<title>Bayesian data comparison</title>\n</head>\n<body>\n"
            f"{body}\n</body>\n</html>\n"
        )

    def render_svg(self) -> str:
        template = self._get_template("report.svg.j2")
        panels = self._panels()
        width = len(panels) * PANEL_WIDTH + (len(panels) + 1) * PANEL_GAP
        return template.render(
            width=width,
            height=PANEL_HEIGHT + 2 * PANEL_GAP,
            panels=panels,
            provenance=self.report.provenance,
        )

    def export(self, format: str, output_path: Path) -> Path:
        """Write the report in ``format`` to ``output_path``."""
        renderers = {
            "json": self.render_json,
            "markdown": self.render_markdown,
            "html": self.render_html,
            "svg": self.render_svg,
        }
        if format not in renderers:
            raise ValueError(f"Unsupported export format: {format}")
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        output_path.write_text(renderers[format](), encoding="utf-8")
        logger.info("Wrote %s report to %s", format, output_path)
        return output_path

    def _get_template(self, template_name: str) -> Template:
        return self.jinja_env.get_template(template_name)

    def _precision_rows(self) -> List[Dict[str, Any]]:
        """One row per interesting parameter with each ranked dataset's posterior precision."""
        ranked = self.report.ranked()
        rows = []
        for label in self.report.interesting_parameters:
            values = [d.parameter_precisions.get(label) for d in ranked]
            if any(v is not None for v in values):
                rows.append({"label": label, "values": values})
        return rows

    def _panels(self) -> List[Dict[str, Any]]:
        """Bar geometry for one panel per measure, in relative nats."""
        ranked = self.report.ranked()
        panels = []
        for p, measure in enumerate(self.report.measures):
            values = [getattr(d.relative, measure) if d.relative is not None else 0.0 for d in ranked]
            top = max(values, default=0.0)
            scale = PLOT_HEIGHT / top if top > 0 else 0.0
            slot = (PANEL_WIDTH - 40) / max(len(values), 1)
            bars = []
            for i, (dataset, value) in enumerate(zip(ranked, values)):
                height = value * scale
                bars.append(
                    {
                        "label": dataset.label,
                        "value": value,
                        "x": 30 + i * slot + 0.15 * slot,
                        "y": PLOT_TOP + PLOT_HEIGHT - height,
                        "width": 0.7 * slot,
                        "height": height,
                        "text_x": 30 + (i + 0.5) * slot,
                        "color": BAR_COLORS[i % len(BAR_COLORS)],
                    }
                )
            panels.append(
                {
                    "measure": measure,
                    "title": MEASURE_TITLES.get(measure, measure),
                    "x": PANEL_GAP + p * (PANEL_WIDTH + PANEL_GAP),
                    "top": PLOT_TOP,
                    "baseline": PLOT_TOP + PLOT_HEIGHT,
                    "axis_max": top,
                    "bars": bars,
                }
            )
        return panels


def export_report(report_file: Path, format: str, output: Optional[Path] = None) -> Path:
    """Re-render an existing report.json; defaults to a sibling file."""
    generator = ReportGenerator.from_report_file(report_file)
    if format not in FORMATS:
        raise ValueError(f"Unsupported export format: {format}")
    target = output or Path(report_file).with_suffix(SUFFIXES[format])
    if format == "json" and Path(target).resolve() == Path(report_file).resolve():
        return Path(target)
    return generator.export(format, target)


def report_schema() -> Dict[str, Any]:
    """JSON schema every report.json validates against."""
    return ComparisonReport.model_json_schema()


def dump_schema() -> str:
    return json.dumps(report_schema(), indent=2, ensure_ascii=False) + "\n"
