"""CSV ingestion for quantsweep exports.

The input is the flat `report export` format; only the documented columns are
read, so the language boundary stays at the CSV. Parsing is strict: a
malformed row fails with a message naming it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

REQUIRED = ("model", "method", "gpu", "tp", "workload", "kind", "target_qps",
            "ttft_p90_ms", "tpot_p90_ms", "energy_per_token_j", "slo_pass")


class CsvFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CurvePoint:
    method: str
    series: str
    qps: float
    ttft_p90: float
    tpot_p90: float
    energy_per_token: float
    slo_pass: bool


def load_points(path: str) -> list[CurvePoint]:
    """Main-run rows as curve points, sorted by (series, qps)."""
    points: list[CurvePoint] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise CsvFormatError(f"{path}: empty file")
        missing = [c for c in REQUIRED if c not in reader.fieldnames]
        if missing:
            raise CsvFormatError(f"{path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            if row.get("kind") != "main":
                continue
            try:
                series = f"{row['model']}/{row['method']}/{row['gpu']}/tp{row['tp']}"
                points.append(CurvePoint(
                    method=row["method"],
                    series=series,
                    qps=float(row["target_qps"]),
                    ttft_p90=float(row["ttft_p90_ms"]),
                    tpot_p90=float(row["tpot_p90_ms"]),
                    energy_per_token=float(row["energy_per_token_j"]),
                    slo_pass=row["slo_pass"] in ("1", "True", "true"),
                ))
            except (KeyError, ValueError) as exc:
                raise CsvFormatError(f"{path}: malformed row {lineno}: {exc}") from exc
    points.sort(key=lambda p: (p.series, p.qps))
    return points


def by_series(points: list[CurvePoint]) -> dict[str, list[CurvePoint]]:
    groups: dict[str, list[CurvePoint]] = {}
    for p in points:
        groups.setdefault(p.series, []).append(p)
    return groups
