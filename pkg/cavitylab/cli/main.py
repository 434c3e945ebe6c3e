"""
CavityLab CLI

Command-line driver for the cavity-recovery experiments: phantom generation,
self-supervised fitting, the weak-label ablation, gradient checks, mask
evaluation and report aggregation. Built with Typer and Rich.
"""

import logging
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import TYPE_CHECKING, Any

import pandas as pd
import typer
from rich import box
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import BarColumn, Progress, SpinnerColumn, TaskProgressColumn, TextColumn
from rich.table import Table

from cavitylab.core.config import ExperimentConfig, parse_config
from cavitylab.core.exceptions import CavityLabError
from cavitylab.core.experiments import (
    EXIT_VALIDATION,
    MetricSummary,
    ProgressCallback,
    exit_code_for,
    run_command,
    summarize_table,
)

if TYPE_CHECKING:
    from cavitylab.cli.export import ExportFormat

console = Console()

app = typer.Typer(
    name="cavitylab",
    help="Differentiable volumetric losses and desk-scale cavity-recovery experiments.",
    add_completion=False,
    rich_markup_mode="rich",
)

CAVITY_GREEN = "#22c55e"
CAVITY_BLUE = "#3b82f6"
CAVITY_AMBER = "#f59e0b"
CAVITY_RED = "#ef4444"

ConfigOption = typer.Option(None, "--config", "-c", help="Experiment config (JSON or YAML)")
OutOption = typer.Option(None, "--out", help="Output directory (overrides out_dir)")
SeedOption = typer.Option(None, "--seed", min=0, help="Global seed (overrides seed)")
VerboseOption = typer.Option(False, "--verbose", "-v", help="Log progress at INFO level")
OutputOption = typer.Option(None, "--output", "-o", help="Also export results (file path or '-')")
FormatOption = typer.Option(None, "--format", "-f", help="Export format: json, csv")
OverridesArgument = typer.Argument(None, help="key.path=value config overrides")


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=False, rich_tracebacks=True)],
        force=True,
    )


def _load_config(
    config: Path | None,
    out: Path | None,
    seed: int | None,
    overrides: list[str] | None,
    verbose: bool,
) -> ExperimentConfig:
    """Parse the config plus flag overrides; exits 1 on any config problem."""
    _configure_logging(verbose)
    assignments = list(overrides or [])
    if out is not None:
        assignments.append(f"out_dir={out}")
    if seed is not None:
        assignments.append(f"seed={seed}")
    try:
        return parse_config(config, assignments)
    except CavityLabError as e:
        console.print(f"[{CAVITY_RED}]Invalid configuration: {e}[/{CAVITY_RED}]")
        raise typer.Exit(exit_code_for(e))


@contextmanager
def _progress(label: str) -> Iterator[ProgressCallback]:
    with Progress(
        SpinnerColumn(spinner_name="dots", style=CAVITY_GREEN),
        TextColumn("[bold white]{task.description}"),
        BarColumn(bar_width=30, complete_style=CAVITY_GREEN),
        TaskProgressColumn(),
        console=console,
        transient=True,
    ) as progress:
        task = progress.add_task(f"[{CAVITY_BLUE}]{label}", total=None)

        def update(command: str, done: int, total: int) -> None:
            progress.update(task, completed=done, total=total, description=f"{command} case {done}/{total}")

        yield update


def _run(cfg: ExperimentConfig, command: str, label: str | None = None, **kwargs: Any) -> tuple[Any, int]:
    """
    Run a command through run_command; exits with its code when no result came back.

    Returns:
        (result, exit code); the code is nonzero only for a failed gradcheck
    """
    results: list[Any] = []
    if label is None:
        code = run_command(cfg, command, on_result=results.append, **kwargs)
    else:
        with _progress(label) as tick:
            code = run_command(cfg, command, progress=tick, on_result=results.append, **kwargs)
    if not results:
        console.print(f"[{CAVITY_RED}]{command} failed (exit {code})[/{CAVITY_RED}]")
        raise typer.Exit(code)
    return results[0], code


def _export(
    output: str | None, format: str | None, write: Callable[[str, "ExportFormat"], None]
) -> None:
    """Resolve the export format the same way for every command, then call ``write(path, fmt)``."""
    if not output:
        return
    from cavitylab.cli.export import ExportError, ExportFormat, detect_format

    if format:
        try:
            export_format = ExportFormat(format.lower())
        except ValueError:
            console.print(f"[{CAVITY_RED}]Invalid format '{format}'. Use 'json' or 'csv'.[/{CAVITY_RED}]")
            raise typer.Exit(EXIT_VALIDATION)
    else:
        export_format = detect_format(output)
        if not export_format:
            console.print(
                f"[{CAVITY_RED}]Cannot detect format from '{output}'. Use --format flag.[/{CAVITY_RED}]"
            )
            raise typer.Exit(EXIT_VALIDATION)

    try:
        write(output, export_format)
    except ExportError as e:
        console.print(f"[{CAVITY_RED}]Export failed: {e}[/{CAVITY_RED}]")
        raise typer.Exit(exit_code_for(e))
    if output != "-":
        console.print(f"[{CAVITY_GREEN}]✓ Exported to {output}[/{CAVITY_GREEN}]")


def _fmt(value: float | None, digits: int = 3) -> str:
    if value is None or (isinstance(value, float) and value != value):
        return "—"
    return f"{value:.{digits}f}"


def _status_cell(status: str) -> str:
    color = CAVITY_GREEN if status == "ok" else CAVITY_AMBER
    return f"[{color}]{status}[/{color}]"


def create_metrics_table(df: pd.DataFrame, title: str) -> Table:
    table = Table(title=f"[bold]{title}", box=box.ROUNDED, border_style=CAVITY_BLUE, header_style=f"bold {CAVITY_BLUE}")
    table.add_column("Case", style="white")
    for name in ("Dice", "IoU", "Precision", "Sensitivity", "HD95", "ASD"):
        table.add_column(name, justify="right")
    table.add_column("Status", justify="center")
    for row in df.to_dict(orient="records"):
        table.add_row(
            str(row["case"]),
            _fmt(row["dice"]),
            _fmt(row["iou"]),
            _fmt(row["precision"]),
            _fmt(row["sensitivity"]),
            _fmt(row["hd95"], 2),
            _fmt(row["asd"], 2),
            _status_cell(row["status"]),
        )
    return table


def create_summary_table(summary: dict[str, dict[str, MetricSummary]], title: str) -> Table:
    table = Table(title=f"[bold]{title}", box=box.ROUNDED, border_style=CAVITY_GREEN, header_style=f"bold {CAVITY_GREEN}")
    table.add_column("Method", style="white")
    for name in ("Dice", "IoU", "HD95", "ASD"):
        table.add_column(name, justify="right")
    for method, metrics in summary.items():
        table.add_row(
            method,
            *(metrics[m].display if m in metrics else "—" for m in ("dice", "iou", "hd95", "asd")),
        )
    return table


@app.command()
def phantom(
    config: Path | None = ConfigOption,
    out: Path | None = OutOption,
    seed: int | None = SeedOption,
    verbose: bool = VerboseOption,
    overrides: list[str] | None = OverridesArgument,
) -> None:
    """
    Generate seeded preop/postop phantom pairs with ground-truth masks.

    Example: cavitylab phantom --out runs/phantoms cases=5 phantom.dims=[24,24,24]
    """
    cfg = _load_config(config, out, seed, overrides, verbose)
    written, _ = _run(cfg, "phantom", "Generating phantoms")
    console.print(f"[{CAVITY_GREEN}]✓ Wrote {len(written)} phantom pairs to {cfg.out_dir}[/{CAVITY_GREEN}]")


@app.command()
def fit(
    config: Path | None = ConfigOption,
    out: Path | None = OutOption,
    seed: int | None = SeedOption,
    phantom_dir: Path | None = typer.Option(
        None, "--phantom-dir", help="Read pairs written by 'cavitylab phantom' instead of generating"
    ),
    output: str | None = OutputOption,
    format: str | None = FormatOption,
    verbose: bool = VerboseOption,
    overrides: list[str] | None = OverridesArgument,
) -> None:
    """
    Recover the removed region of every case by fitting the inverted probability map.

    Writes delta.vol and mask.vol per case plus metrics.csv.
    """
    cfg = _load_config(config, out, seed, overrides, verbose)
    df, _ = _run(cfg, "fit", "Fitting cases", phantom_dir=phantom_dir)

    console.print(create_metrics_table(df, "Self-supervised recovery"))
    console.print(create_summary_table(summarize_table(df), "Summary"))

    from cavitylab.cli.export import export_table

    _export(output, format, lambda path, fmt: export_table(df, path, fmt, command="fit"))


@app.command()
def ablate(
    config: Path | None = ConfigOption,
    out: Path | None = OutOption,
    seed: int | None = SeedOption,
    phantom_dir: Path | None = typer.Option(None, "--phantom-dir", help="Read saved phantom pairs"),
    output: str | None = OutputOption,
    format: str | None = FormatOption,
    verbose: bool = VerboseOption,
    overrides: list[str] | None = OverridesArgument,
) -> None:
    """
    Compare weak-label losses and similarity-loss variants across cases.

    Example: cavitylab ablate cases=10 corruption.flip_rate=0.3
    """
    cfg = _load_config(config, out, seed, overrides, verbose)
    (table, tests), _ = _run(cfg, "ablate", "Running ablation", phantom_dir=phantom_dir)

    console.print(create_summary_table(summarize_table(table), "Ablation (mean ± std)"))

    wtable = Table(title="[bold]Wilcoxon signed-rank", box=box.ROUNDED, border_style=CAVITY_BLUE)
    wtable.add_column("Comparison", style="white")
    wtable.add_column("Metric")
    wtable.add_column("p", justify="right")
    wtable.add_column("n", justify="right")
    wtable.add_column("Significant", justify="center")
    for row in tests.to_dict(orient="records"):
        mark = f"[{CAVITY_GREEN}]✓[/{CAVITY_GREEN}]" if row["significant"] else "─"
        if row["status"] != "ok":
            mark = _status_cell(row["status"])
        wtable.add_row(
            f"{row['method_a']} vs {row['method_b']}",
            row["metric"],
            _fmt(row["p_value"], 4),
            str(row["n_effective"]),
            mark,
        )
    console.print(wtable)

    from cavitylab.cli.export import export_table

    _export(output, format, lambda path, fmt: export_table(table, path, fmt, command="ablate"))


@app.command()
def gradcheck(
    config: Path | None = ConfigOption,
    out: Path | None = OutOption,
    seeds: int = typer.Option(5, "--seeds", min=1, help="Random instances per suite"),
    probes: int = typer.Option(20, "--probes", min=1, help="Coordinates probed per instance"),
    output: str | None = OutputOption,
    format: str | None = FormatOption,
    verbose: bool = VerboseOption,
    overrides: list[str] | None = OverridesArgument,
) -> None:
    """
    Check every analytic gradient against central finite differences.

    Exits 1 if any suite exceeds its tolerance.
    """
    cfg = _load_config(config, out, None, overrides, verbose)
    with console.status(f"[{CAVITY_BLUE}]Running finite-difference suites..."):
        report, code = _run(cfg, "gradcheck", seeds=seeds, probes=probes)

    table = Table(title="[bold]Gradient check", box=box.ROUNDED, border_style=CAVITY_BLUE)
    table.add_column("Suite", style="white")
    table.add_column("Max rel. error", justify="right")
    table.add_column("Tolerance", justify="right")
    table.add_column("Result", justify="center")
    for row in report.rows:
        result = f"[{CAVITY_GREEN}]PASS[/{CAVITY_GREEN}]" if row.passed else f"[{CAVITY_RED}]FAIL[/{CAVITY_RED}]"
        table.add_row(row.suite, f"{row.max_rel_error:.2e}", f"{row.tolerance:.0e}", result)
    console.print(table)

    from cavitylab.cli.export import export_gradcheck

    _export(output, format, lambda path, fmt: export_gradcheck(report, path, fmt))

    if code:
        console.print(f"[{CAVITY_RED}]{len(report.failures)} suite(s) failed[/{CAVITY_RED}]")
        raise typer.Exit(code)


@app.command(name="eval")
def eval_masks(
    pred: Path = typer.Argument(..., help="Predicted mask (VOL1, u8)"),
    gt: Path = typer.Argument(..., help="Ground-truth mask (VOL1, u8)"),
    config: Path | None = ConfigOption,
    out: Path | None = OutOption,
    output: str | None = OutputOption,
    format: str | None = FormatOption,
    verbose: bool = VerboseOption,
    overrides: list[str] | None = OverridesArgument,
) -> None:
    """
    Compute the metric battery between two mask files.

    Example: cavitylab eval runs/latest/case_000/mask.vol runs/latest/case_000/gt_mask.vol
    """
    cfg = _load_config(config, out, None, overrides, verbose)
    metrics, _ = _run(cfg, "eval", pred_path=pred, gt_path=gt)

    df = pd.DataFrame([{"case": pred.stem, **metrics.model_dump()}])
    console.print(create_metrics_table(df, "Evaluation"))

    from cavitylab.cli.export import export_table

    _export(output, format, lambda path, fmt: export_table(df, path, fmt, command="eval"))


@app.command()
def report(
    config: Path | None = ConfigOption,
    out: Path | None = OutOption,
    output: str | None = OutputOption,
    format: str | None = FormatOption,
    verbose: bool = VerboseOption,
    args: list[str] | None = typer.Argument(
        None, help="Metric CSVs to aggregate, then key.path=value overrides"
    ),
) -> None:
    """
    Aggregate metric CSVs into summary.json (mean ± std per method and metric).

    With no CSVs, metrics.csv and ablation.csv from the output directory are used.
    """
    args = args or []
    overrides = [a for a in args if "=" in a]
    inputs = [a for a in args if "=" not in a]
    cfg = _load_config(config, out, None, overrides, verbose)
    summary, _ = _run(cfg, "report", inputs=inputs)

    for name, block in summary.items():
        table = Table(title=f"[bold]{name}", box=box.ROUNDED, border_style=CAVITY_GREEN)
        table.add_column("Method", style="white")
        table.add_column("Metric")
        table.add_column("Mean ± std", justify="right")
        table.add_column("n", justify="right")
        for method, metrics in block.items():
            for metric, stats in metrics.items():
                table.add_row(method, metric, stats["display"], str(stats["n"]))
        console.print(table)
    console.print(Panel(f"Summary written to {Path(cfg.out_dir) / 'summary.json'}", border_style=CAVITY_BLUE))

    from cavitylab.cli.export import export_summary

    _export(output, format, lambda path, fmt: export_summary(summary, path, fmt))


def main() -> None:
    """Entry point for the CLI."""
    app()


if __name__ == "__main__":
    main()
