"""Secondary acceptance: the export -> plot round trip against the real
pipeline CSV, plus the constructed one-transition rank chart."""

import csv
import subprocess
import sys
from pathlib import Path

import pytest

from reportplots.data import load_points
from reportplots.plots import plot_energy_rank, plot_qps_curves


@pytest.fixture(scope="session")
def exported_csv(tmp_path_factory):
    """Profile the smoke plan through the main pipeline CLI and export it."""
    tmp = tmp_path_factory.mktemp("roundtrip")
    store = tmp / "smoke.jsonl"
    plan = tmp / "plan.yaml"
    plan.write_text(f"""
configs:
  models: [llama2-13b]
  methods: [W8A16-INT]
  gpus: [H100]
  tp: [1]
workloads:
  - dataset: sharegpt
slo: {{ttft_p90_ms: 1000, tpot_p90_ms: 200, max_error_rate: 0.01}}
grid: {{fractions: [0.25, 0.5, 0.75, 1.0]}}
probe: {{duration: 60, warmup: 5}}
main: {{duration: 60, warmup: 5}}
store: {store.as_posix()}
resolution: 0.5
qps_cap: 64
""")
    subprocess.run([sys.executable, "-m", "quantsweep.cli", "profile",
                    "--plan", str(plan)], check=True, capture_output=True)
    out = tmp / "export.csv"
    subprocess.run([sys.executable, "-m", "quantsweep.cli", "report", "export",
                    "--store", str(store), "--out", str(out)],
                   check=True, capture_output=True)
    return out


def test_round_trip_renders_three_panels_with_slo_line(exported_csv, tmp_path):
    points = load_points(str(exported_csv))
    assert len(points) == 4  # smoke grid
    result = plot_qps_curves(points, tmp_path / "curves",
                             ttft_slo_ms=1000, tpot_slo_ms=200)
    assert len(result.panels) == 3
    assert result.slo_lines == {"ttft_p90": 1000.0, "tpot_p90": 200.0}
    assert result.series == ["llama2-13b/W8A16-INT/H100/tp1"]
    svg = next(p for p in result.files if p.suffix == ".svg")
    png = next(p for p in result.files if p.suffix == ".png")
    assert svg.stat().st_size > 0 and png.stat().st_size > 0
    print(f"PASS plot-round-trip: 3 panels with SLO dashed lines from "
          f"{exported_csv.name} ({len(points)} store rows)")


def test_constructed_csv_emits_exactly_one_transition(tmp_path):
    columns = ["model", "method", "gpu", "tp", "workload", "kind", "target_qps",
               "achieved_qps", "ttft_p50_ms", "ttft_p90_ms", "tpot_p50_ms",
               "tpot_p90_ms", "energy_total_j", "tokens_total",
               "energy_per_token_j", "error_rate", "slo_pass", "saturation_qps"]
    path = tmp_path / "constructed.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for q in range(1, 9):
            for method, a, ok in (("FP16", 3.0, 1), ("W4A8", 1.5, 1 if q < 6 else 0)):
                w.writerow({
                    "model": "llama2-13b", "method": method, "gpu": "H100", "tp": 1,
                    "workload": "sharegpt", "kind": "main", "target_qps": q,
                    "achieved_qps": q, "ttft_p50_ms": 40, "ttft_p90_ms": 80,
                    "tpot_p50_ms": 20, "tpot_p90_ms": 40,
                    "energy_total_j": 1000 * (a / q + 0.05), "tokens_total": 1000,
                    "energy_per_token_j": a / q + 0.05, "error_rate": 0.0,
                    "slo_pass": ok, "saturation_qps": 8.0,
                })
    analysis = plot_energy_rank(load_points(str(path)), tmp_path / "rank")
    assert len(analysis.transitions) == 1
    assert analysis.transitions[0] == 6.0
    print("PASS energy-rank-transition: exactly one transition marker at qps 6")
