"""bdcomp CLI main entry point."""

import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, NoReturn, Optional, Tuple

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.table import Table

from bdcomp import __version__
from bdcomp.core.compare import (
    MEASURE_TITLES,
    ComparisonReport,
    compare_posteriors,
    fit_bundles,
    make_provenance,
    run_pipeline,
)
from bdcomp.core.config import DatasetNoise, RunConfig, SynthConfig
from bdcomp.core.exceptions import InconsistentSubjectsError, InputError
from bdcomp.core.io import (
    MANIFEST,
    load_cohort,
    load_inputs,
    load_json,
    load_posteriors,
    load_spec,
    save_cohort,
    save_posteriors,
)
from bdcomp.core.synth import default_scenario, generate_cohort, truth_from_dict
from bdcomp.docs.generator import FORMATS, ReportGenerator, dump_schema, export_report

console = Console()
err_console = Console(stderr=True)

EXIT_FAILURE = 1
EXIT_INPUT = 2
EXIT_PARTIAL = 3


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


def _fail(e: Exception) -> NoReturn:
    """Print ``e`` to stderr and exit with the code its type maps to."""
    err_console.print(f"[red]Error:[/red] {escape(str(e))}")
    if isinstance(e, (InputError, InconsistentSubjectsError, ValueError)):
        sys.exit(EXIT_INPUT)
    sys.exit(EXIT_FAILURE)


def _parse_noise(ctx: click.Context, param: click.Parameter, values: Tuple[str, ...]) -> List[DatasetNoise]:
    """``LABEL=SD`` or ``LABEL=SD@TR``."""
    datasets = []
    for value in values:
        try:
            label, rest = value.split("=", 1)
            sd, _, tr = rest.partition("@")
            datasets.append(DatasetNoise(label=label, noise_sd=float(sd), tr=float(tr) if tr else None))
        except ValueError as e:
            raise click.BadParameter(f"{value!r} is not LABEL=SD[@TR] ({e})") from e
    return datasets


@click.group()
@click.version_option(version=__version__, prog_name="bdcomp")
@click.option("--verbose", "-v", is_flag=True, help="Enable verbose output")
@click.option("--config", "config_file", type=click.Path(path_type=Path), help="JSON run configuration")
@click.option("--seed", type=int, help="Master seed (overrides the config file)")
@click.option("--jobs", "-j", type=click.IntRange(min=1), help="Parallel subject fits (default: all cores)")
@click.option("--output-dir", type=click.Path(path_type=Path), help="Where outputs are written")
@click.pass_context
def cli(
    ctx: click.Context,
    verbose: bool,
    config_file: Optional[Path],
    seed: Optional[int],
    jobs: Optional[int],
    output_dir: Optional[Path],
) -> None:
    """bdcomp - Bayesian data comparison.

    Rank datasets by the quality of the group-level inferences they support.
    """
    _setup_logging(verbose)
    if verbose:
        console.print(f"[dim]bdcomp v{__version__} - Verbose mode enabled[/dim]")
    try:
        config = RunConfig.load(config_file) if config_file else RunConfig()
    except InputError as e:
        _fail(e)
    overrides: Dict[str, Any] = {"seed": seed, "jobs": jobs, "output_dir": output_dir}
    ctx.obj = config.model_copy(update={k: v for k, v in overrides.items() if v is not None})


@cli.command()
@click.option("--subjects", "-n", type=click.IntRange(min=2), help="Subjects per dataset")
@click.option(
    "--noise", multiple=True, callback=_parse_noise, help="Dataset as LABEL=SD or LABEL=SD@TR (repeatable)"
)
@click.option("--spec", "spec_file", type=click.Path(path_type=Path), help="DCM spec JSON (default scenario if omitted)")
@click.option("--inputs", "inputs_file", type=click.Path(path_type=Path), help="Input schedule JSON for --spec")
@click.option("--truth", "truth_file", type=click.Path(path_type=Path), help="Ground-truth parameters JSON for --spec")
@click.pass_obj
def simulate(
    config: RunConfig,
    subjects: Optional[int],
    noise: List[DatasetNoise],
    spec_file: Optional[Path],
    inputs_file: Optional[Path],
    truth_file: Optional[Path],
) -> None:
    """Generate a synthetic multi-dataset cohort with known ground truth."""
    try:
        synth_updates: Dict[str, Any] = {}
        if subjects is not None:
            synth_updates["n_subjects"] = subjects
        if noise:
            synth_updates["datasets"] = noise
        synth = SynthConfig.model_validate({**config.synth.model_dump(), **synth_updates})
        config = config.model_copy(update={"synth": synth})

        if spec_file is not None:
            if inputs_file is None:
                raise InputError("--spec needs --inputs")
            spec = load_spec(spec_file)
            inputs = load_inputs(inputs_file)
            payload = load_json(truth_file) if truth_file else {}
            truth = truth_from_dict(spec, payload, synth.between_subject_sd)
            duration = None
        else:
            spec, inputs, truth = default_scenario(synth)
            duration = synth.duration

        cohort_dir = config.output_dir / "cohort"
        console.print(f"[blue]Simulating cohort in[/blue] {cohort_dir}")
        with console.status("[bold green]Simulating subjects..."):
            bundles, ground_truth = generate_cohort(
                spec, inputs, truth, synth.n_subjects, synth.datasets, config.seed, duration=duration
            )
            save_cohort(cohort_dir, bundles, make_provenance(config), ground_truth)

        table = Table(title="Simulated datasets")
        table.add_column("Dataset", style="cyan")
        table.add_column("Noise SD", justify="right")
        table.add_column("TR (s)", justify="right")
        table.add_column("Subjects", justify="right")
        for bundle in bundles:
            first = bundle.subjects[0]
            table.add_row(
                bundle.label,
                f"{ground_truth.noise_sd[bundle.label]:.3g}",
                f"{first.spec.tr:.3g}",
                str(bundle.n_subjects),
            )
        console.print(table)
        console.print(f"[green]✓[/green] Cohort written to {cohort_dir}")

    except Exception as e:
        _fail(e)


@cli.command()
@click.option("--cohort", "cohort_dir", type=click.Path(path_type=Path), help="Cohort directory (default: <output-dir>/cohort)")
@click.pass_obj
def fit(config: RunConfig, cohort_dir: Optional[Path]) -> None:
    """Fit every subject of every dataset by variational Laplace."""
    try:
        cohort_dir = cohort_dir or config.cohort_dir or config.output_dir / "cohort"
        bundles = load_cohort(cohort_dir)
        if not bundles:
            raise InputError(f"no datasets in {cohort_dir}")

        n_fits = sum(b.n_subjects for b in bundles)
        with console.status(f"[bold green]Fitting {n_fits} subjects..."):
            results = fit_bundles(bundles, config)
        posterior_dir = config.output_dir / "posteriors"
        save_posteriors(posterior_dir, results, make_provenance(config))

        table = Table(title="Subject fits")
        table.add_column("Dataset", style="cyan")
        table.add_column("Subject")
        table.add_column("F", justify="right")
        table.add_column("Iterations", justify="right")
        table.add_column("Converged")
        failures = 0
        for label, rows in results.items():
            for sid, posterior, error in rows:
                if posterior is None:
                    failures += 1
                    table.add_row(label, sid, "-", "-", f"[red]failed: {escape(str(error))}[/red]")
                else:
                    table.add_row(
                        label,
                        sid,
                        f"{posterior.free_energy:.2f}",
                        str(posterior.n_iterations),
                        "[green]yes[/green]" if posterior.converged else "[yellow]no[/yellow]",
                    )
        console.print(table)

        if failures:
            err_console.print(f"[yellow]Warning:[/yellow] {failures} of {n_fits} fits failed")
            sys.exit(EXIT_PARTIAL)
        console.print(f"[green]✓[/green] Posteriors written to {posterior_dir}")

    except Exception as e:
        _fail(e)


def _print_report(report: ComparisonReport) -> None:
    table = Table(title="Bayesian data comparison (nats relative to worst)")
    table.add_column("Dataset", style="cyan")
    for measure in report.measures:
        table.add_column(MEASURE_TITLES[measure], justify="right")
    table.add_column("Status")
    for dataset in report.datasets:
        if dataset.relative is None:
            cells = ["-"] * len(report.measures)
            status = f"[red]excluded: {escape(dataset.reason or '')}[/red]"
        else:
            cells = [f"{getattr(dataset.relative, m):.2f}" for m in report.measures]
            status = "[green]ok[/green]"
        table.add_row(dataset.label, *cells, status)
    console.print(table)
    if report.pruned_parameters:
        console.print(f"[dim]Pruned at group level: {', '.join(report.pruned_parameters)}[/dim]")
    console.print(f"[bold]{report.verdict.statement}[/bold]")


@cli.command()
@click.option("--posteriors", "posterior_dir", type=click.Path(path_type=Path), help="Fitted posteriors directory")
@click.option("--cohort", "cohort_dir", type=click.Path(path_type=Path), help="Cohort to fit when no posteriors exist")
@click.option("--svg/--no-svg", default=None, help="Also write report.svg")
@click.pass_obj
def compare(
    config: RunConfig, posterior_dir: Optional[Path], cohort_dir: Optional[Path], svg: Optional[bool]
) -> None:
    """Compare datasets: pooled group model, pruning, empirical Bayes and the four measures."""
    try:
        if svg is not None:
            config = config.model_copy(update={"svg": svg})
        posterior_dir = posterior_dir or config.posterior_dir
        if posterior_dir is None and cohort_dir is None and (config.output_dir / "posteriors" / MANIFEST).exists():
            posterior_dir = config.output_dir / "posteriors"

        with console.status("[bold green]Comparing datasets..."):
            if posterior_dir is not None:
                posteriors, failures = load_posteriors(posterior_dir)
                report = compare_posteriors(posteriors, config, failures)
            else:
                bundles = load_cohort(cohort_dir or config.cohort_dir or config.output_dir / "cohort")
                report = run_pipeline(bundles, config)
            written = ReportGenerator(report, config.output_dir).generate_all(svg=config.svg)

        _print_report(report)
        for path in written:
            console.print(f"[green]✓[/green] Wrote {path}")
        if any(d.status == "excluded" for d in report.datasets):
            sys.exit(EXIT_PARTIAL)

    except Exception as e:
        _fail(e)


@cli.command()
@click.argument("report_file", type=click.Path(exists=True, path_type=Path))
@click.option("--format", "-f", type=click.Choice(list(FORMATS)), default="svg", help="Output format")
@click.option("--output", "-o", type=click.Path(path_type=Path), help="Output file path")
def report(report_file: Path, format: str, output: Optional[Path]) -> None:
    """Re-render an existing report.json."""
    try:
        path = export_report(report_file, format, output)
        console.print(f"[green]✓[/green] Report exported to {path}")
    except Exception as e:
        _fail(e)


@cli.command()
@click.option("--output", "-o", type=click.Path(path_type=Path), help="Write the schema to a file")
def schema(output: Optional[Path]) -> None:
    """Print the JSON schema of report.json."""
    text = dump_schema()
    if output is None:
        click.echo(text, nl=False)
    else:
        output.write_text(text, encoding="utf-8")
        console.print(f"[green]✓[/green] Schema written to {output}")


if __name__ == "__main__":
    cli()
