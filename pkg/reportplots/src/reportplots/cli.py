"""Command-line surface: CSV in, SVG/PNG out."""

from __future__ import annotations

import sys

import click

from .data import CsvFormatError, load_points
from .plots import plot_energy_rank, plot_qps_curves


@click.group()
def main() -> None:
    """Render quantsweep CSV exports into figures."""


@main.command("qps-curves")
@click.option("--csv", "csv_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, help="output path base (without extension)")
@click.option("--ttft-slo-ms", default=None, type=float)
@click.option("--tpot-slo-ms", default=None, type=float)
def qps_curves(csv_path: str, out: str, ttft_slo_ms: float | None,
               tpot_slo_ms: float | None) -> None:
    try:
        points = load_points(csv_path)
    except CsvFormatError as exc:
        click.echo(str(exc), err=True)
        sys.exit(1)
    result = plot_qps_curves(points, out, ttft_slo_ms=ttft_slo_ms, tpot_slo_ms=tpot_slo_ms)
    click.echo(f"{len(result.series)} series across {len(result.panels)} panels "
               f"({len(result.skipped)} skipped) -> {', '.join(map(str, result.files))}")


@main.command("energy-rank")
@click.option("--csv", "csv_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, help="output path base (without extension)")
def energy_rank(csv_path: str, out: str) -> None:
    try:
        points = load_points(csv_path)
        analysis = plot_energy_rank(points, out)
    except (CsvFormatError, ValueError) as exc:
        click.echo(str(exc), err=True)
        sys.exit(1)
    click.echo(f"{len(analysis.qps_points)} QPS levels, {len(analysis.transitions)} "
               f"transition(s) -> {', '.join(map(str, analysis.files))}")


if __name__ == "__main__":
    main()
