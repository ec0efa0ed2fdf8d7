"""Figure builders over exported curve points.

Outputs are SVG and PNG with pinned metadata so reruns produce byte-identical
files. Each builder returns an analysis object describing what was drawn, so
callers and tests can assert on content without parsing images.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "reportplots"

import matplotlib.pyplot as plt

from .data import CurvePoint, by_series

log = logging.getLogger(__name__)

PANELS = (
    ("ttft_p90", "TTFT p90 (ms)"),
    ("tpot_p90", "TPOT p90 (ms)"),
    ("energy_per_token", "Energy per token (J)"),
)


def _save(fig, out_base: Path) -> list[Path]:
    out_base.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for ext in ("svg", "png"):
        path = out_base.with_suffix(f".{ext}")
        fig.savefig(path, metadata={"Date": None} if ext == "svg" else None)
        written.append(path)
    plt.close(fig)
    return written


@dataclass
class QpsCurvesResult:
    panels: tuple = tuple(name for name, _ in PANELS)
    series: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    slo_lines: dict = field(default_factory=dict)  # panel -> threshold drawn
    files: list = field(default_factory=list)


def plot_qps_curves(points: list[CurvePoint], out_base: str | Path,
                    ttft_slo_ms: float | None = None,
                    tpot_slo_ms: float | None = None) -> QpsCurvesResult:
    """Latency and energy vs QPS: one panel per metric, one series per
    config, SLO thresholds as horizontal dashed lines when given.

    Series with fewer than 2 points are skipped with a warning.
    """
    result = QpsCurvesResult()
    groups = by_series(points)
    usable = {}
    for series, pts in groups.items():
        if len(pts) < 2:
            log.warning("skipping %s: fewer than 2 QPS points", series)
            result.skipped.append(series)
            continue
        usable[series] = pts
    result.series = sorted(usable)

    fig, axes = plt.subplots(1, 3, figsize=(14, 4.2))
    slo_for = {"ttft_p90": ttft_slo_ms, "tpot_p90": tpot_slo_ms, "energy_per_token": None}
    for ax, (attr, label) in zip(axes, PANELS):
        for series in result.series:
            pts = usable[series]
            ax.plot([p.qps for p in pts], [getattr(p, attr) for p in pts],
                    marker="o", markersize=3, linewidth=1.2, label=series)
        slo = slo_for[attr]
        if slo is not None:
            ax.axhline(slo, color="black", linestyle="--", linewidth=1.0)
            result.slo_lines[attr] = slo
        ax.set_xlabel("QPS (req/s)")
        ax.set_ylabel(label)
        if attr != "energy_per_token":
            ax.set_yscale("log")
    if result.series:
        axes[0].legend(fontsize=7, loc="upper left")
    fig.tight_layout()
    result.files = _save(fig, Path(out_base))
    return result


@dataclass
class RankAnalysis:
    qps_points: list = field(default_factory=list)
    ranks: dict = field(default_factory=dict)  # qps -> [(method, energy, compliant)] best first
    winners: dict = field(default_factory=dict)  # qps -> cheapest SLO-compliant method
    transitions: list = field(default_factory=list)  # qps where the winner changes
    best_saving: dict = field(default_factory=dict)  # qps -> (abs J saved vs FP16, pct)
    files: list = field(default_factory=list)


def analyze_energy_rank(points: list[CurvePoint]) -> RankAnalysis:
    """Rank methods by energy per token at each QPS level; track where the
    cheapest SLO-compliant method changes and the saving vs FP16."""
    methods = {p.method for p in points}
    if "FP16" not in methods:
        raise ValueError("energy rank requires an FP16 series for the savings baseline")
    analysis = RankAnalysis()
    by_qps: dict[float, dict[str, CurvePoint]] = {}
    for p in points:
        by_qps.setdefault(round(p.qps, 6), {})[p.method] = p
    analysis.qps_points = sorted(by_qps)

    prev_winner = None
    for q in analysis.qps_points:
        rows = by_qps[q]
        ranked = sorted(rows.values(), key=lambda p: p.energy_per_token)
        analysis.ranks[q] = [(p.method, p.energy_per_token, p.slo_pass) for p in ranked]
        compliant = [p for p in ranked if p.slo_pass]
        winner = compliant[0].method if compliant else None
        analysis.winners[q] = winner
        if prev_winner is not None and winner != prev_winner:
            analysis.transitions.append(q)
        prev_winner = winner
        fp16 = rows.get("FP16")
        if fp16 is not None and compliant:
            saved = fp16.energy_per_token - compliant[0].energy_per_token
            pct = 100.0 * saved / fp16.energy_per_token if fp16.energy_per_token else 0.0
            analysis.best_saving[q] = (saved, pct)
    return analysis


def plot_energy_rank(points: list[CurvePoint], out_base: str | Path) -> RankAnalysis:
    """Energy-efficiency rank evolution: per-QPS method ranks with
    SLO-violating methods grayed out, transition markers where the optimal
    configuration changes, annotated with the best saving vs FP16."""
    analysis = analyze_energy_rank(points)
    methods = sorted({m for q in analysis.qps_points for m, _, _ in analysis.ranks[q]})
    fig, (ax_rank, ax_save) = plt.subplots(
        2, 1, figsize=(10, 7), sharex=True, gridspec_kw={"height_ratios": [2.2, 1]})

    for method in methods:
        xs, ys = [], []
        for q in analysis.qps_points:
            for rank, (m, _, _) in enumerate(analysis.ranks[q], start=1):
                if m == method:
                    xs.append(q)
                    ys.append(rank)
        ax_rank.plot(xs, ys, marker="o", markersize=3, linewidth=1.0, label=method)
    # gray out SLO violations
    bad_x, bad_y = [], []
    for q in analysis.qps_points:
        for rank, (m, _, ok) in enumerate(analysis.ranks[q], start=1):
            if not ok:
                bad_x.append(q)
                bad_y.append(rank)
    if bad_x:
        ax_rank.scatter(bad_x, bad_y, s=60, facecolors="lightgray",
                        edgecolors="gray", zorder=3)
    for q in analysis.transitions:
        ax_rank.axvline(q, color="crimson", linestyle=":", linewidth=1.2)
        ax_rank.annotate("transition", (q, 1), rotation=90, fontsize=7,
                         color="crimson", xytext=(3, 6), textcoords="offset points")
    ax_rank.invert_yaxis()
    ax_rank.set_ylabel("energy rank (1 = best)")
    ax_rank.legend(fontsize=7, ncol=3)

    xs = [q for q in analysis.qps_points if q in analysis.best_saving]
    ax_save.plot(xs, [analysis.best_saving[q][0] for q in xs], marker="s",
                 markersize=3, color="seagreen", label="best saving vs FP16 (J/token)")
    for q in xs:
        if q in analysis.transitions:
            ax_save.annotate(f"{analysis.best_saving[q][1]:.0f}%",
                             (q, analysis.best_saving[q][0]), fontsize=7,
                             xytext=(2, 4), textcoords="offset points")
    ax_save.set_xlabel("QPS (req/s)")
    ax_save.set_ylabel("J/token saved")
    ax_save.legend(fontsize=7)
    fig.tight_layout()
    analysis.files = _save(fig, Path(out_base))
    return analysis
