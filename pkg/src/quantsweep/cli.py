"""Command-line entry point for the whole pipeline."""

from __future__ import annotations

import csv
import math
import os
import pickle
import sys

import click
import yaml

from .benchmark import DirectEndpoint, SimInstance, ProbeSpec
from .coordinator import execute_plan, expand_plan, load_plan
from .engine.params import default_params
from .engine.server import serve_protocol
from .model import ConfigError, SloSpec
from .optimizer import (
    TraceSpec,
    build_curves,
    evaluate_strategies,
    optimal_config,
    parse_config_key,
    synth_trace,
)
from .predictor import (
    FeatureRow,
    cross_gpu,
    evaluate_splits,
    leave_out_input_len,
    leave_out_output_len,
    random_split,
    read_rows_csv,
    report_csv,
    train as train_model,
    write_rows_csv,
)
from .quality import load_quality
from .refdata import load_reference
from .saturation import InfeasibleConfigError, SearchOpts, find_saturation
from .store import ResultStore
from .model import validate_config


@click.group()
def main() -> None:
    """Quantized-serving characterization pipeline."""


# -- plan -------------------------------------------------------------------------

@main.group()
def plan() -> None:
    """Profiling-plan utilities."""


@plan.command("validate")
@click.argument("plan_file", type=click.Path(exists=True))
def plan_validate(plan_file: str) -> None:
    """Check a plan file; nonzero exit and a report if any config is invalid."""
    p = load_plan(plan_file)
    tasks, report = expand_plan(p)
    if not report.ok:
        click.echo(f"REJECTED: {len(report.rejected)} invalid config(s)", err=True)
        for key, reason in report.rejected:
            click.echo(f"  {key}: {reason}", err=True)
        sys.exit(1)
    click.echo(f"OK: {len(p.configs)} configs x {len(p.workloads)} workloads "
               f"({len(tasks)} profiling tasks)")


# -- simulate ----------------------------------------------------------------------

@main.group()
def simulate() -> None:
    """Simulated serving engine."""


@simulate.command("serve")
@click.option("--model", required=True)
@click.option("--method", required=True)
@click.option("--gpu", required=True)
@click.option("--tp", default=1, type=int)
@click.option("--port", default=8011, type=int)
@click.option("--time-scale", default=1.0, type=float,
              help="virtual seconds per wall second")
def simulate_serve(model: str, method: str, gpu: str, tp: int, port: int,
                   time_scale: float) -> None:
    """Run the wire-protocol facade over one simulated engine."""
    ref = load_reference()
    config = ref.config(model, method, gpu, tp)
    params = default_params(config)
    handle = serve_protocol(config, params, port=port, time_scale=time_scale)
    click.echo(f"serving {config.key} on {handle.url} (time scale x{time_scale})")
    try:
        handle._thread.join()
    except KeyboardInterrupt:
        handle.stop()


# -- profiling ----------------------------------------------------------------------

def _endpoint_override(flag_value: str | None):
    return flag_value or os.environ.get("QUANTSWEEP_ENDPOINT") or None


@main.command("saturate")
@click.option("--plan", "plan_file", required=True, type=click.Path(exists=True))
@click.option("--endpoint", default=None, help="target URL instead of launching engines")
def saturate_cmd(plan_file: str, endpoint: str | None) -> None:
    """Run only the saturation searches of a plan."""
    p = load_plan(plan_file)
    store, report = execute_plan(p, endpoint_override=_endpoint_override(endpoint), mains=False)
    _finish_run(store, report)


@main.command("profile")
@click.option("--plan", "plan_file", required=True, type=click.Path(exists=True))
@click.option("--endpoint", default=None, help="target URL instead of launching engines")
def profile_cmd(plan_file: str, endpoint: str | None) -> None:
    """Run a full plan: saturation searches plus the main profiling grid."""
    p = load_plan(plan_file)
    before = len(ResultStore(p.output_store))
    store, report = execute_plan(p, endpoint_override=_endpoint_override(endpoint))
    new = len(store) - before
    click.echo(f"{new} new records in {p.output_store}")
    _finish_run(store, report)


def _finish_run(store: ResultStore, report) -> None:
    aborted = store.by_kind("aborted")
    for key, reason in report.rejected:
        click.echo(f"rejected {key}: {reason}", err=True)
    for rec in aborted:
        click.echo(f"aborted {rec['config_key']}: {rec['data'].get('reason')}", err=True)
    if aborted or not report.ok:
        sys.exit(1)


# -- optimize -----------------------------------------------------------------------

@main.group()
def optimize() -> None:
    """Capacity planning and strategy studies over a profile store."""


@optimize.command("capacity")
@click.option("--store", "store_path", required=True, type=click.Path(exists=True))
@click.option("--qps", required=True, type=float)
@click.option("--workload", default=None, help="restrict to one workload id")
@click.option("--quality-min", default=None, type=float)
@click.option("--task", default="chat-S", help="quality-table task for --quality-min")
@click.option("--ttft-slo-ms", default=1000.0, type=float)
@click.option("--tpot-slo-ms", default=200.0, type=float)
@click.option("--out", default="-", help="CSV path or - for stdout")
def optimize_capacity(store_path: str, qps: float, workload: str | None,
                      quality_min: float | None, task: str,
                      ttft_slo_ms: float, tpot_slo_ms: float, out: str) -> None:
    """Rank configurations by cluster energy at the requested demand."""
    store = ResultStore(store_path)
    curves = build_curves(store)
    if workload:
        curves = [c for c in curves if c.workload_id == workload]
    if not curves:
        click.echo("no usable curves in store", err=True)
        sys.exit(1)
    slo = SloSpec(ttft_p90_max=ttft_slo_ms, tpot_p90_max=tpot_slo_ms, max_error_rate=1.0)
    quality_of = None
    if quality_min is not None:
        qt = load_quality()
        quality_of = lambda c: qt.quality(c.model, c.method, task)
    try:
        ranked = optimal_config(curves, qps, slo, quality_min, quality_of)
    except ValueError as exc:
        click.echo(str(exc), err=True)
        sys.exit(1)
    rows = [["rank", "model", "method", "gpu", "tp", "instances", "gpus",
             "per_instance_qps", "energy_per_token_j", "extrapolated"]]
    for i, r in enumerate(ranked, 1):
        model, method, gpu, tp = parse_config_key(r.curve.config_key)
        rows.append([i, model, method, gpu, tp, r.instances, r.gpus,
                     f"{r.per_instance_qps:.3f}", f"{r.energy_per_token:.6f}",
                     int(r.extrapolated)])
    _write_csv(rows, out)


@optimize.command("strategies")
@click.option("--store", "store_path", required=True, type=click.Path(exists=True))
@click.option("--trace-spec", "trace_file", default=None, type=click.Path(exists=True),
              help="YAML with duration/aggregate_qps/mix/seed")
@click.option("--out", default="-", help="CSV path or - for stdout")
def optimize_strategies(store_path: str, trace_file: str | None, out: str) -> None:
    """Evaluate the three selection strategies over a synthetic trace."""
    store = ResultStore(store_path)
    spec = TraceSpec()
    if trace_file:
        raw = yaml.safe_load(open(trace_file)) or {}
        spec = TraceSpec(
            duration=float(raw.get("duration", spec.duration)),
            aggregate_qps=float(raw.get("aggregate_qps", spec.aggregate_qps)),
            mix=raw.get("mix", dict(spec.mix)),
            seed=int(raw.get("seed", 0)),
        )
    trace = synth_trace(spec)
    outcomes = evaluate_strategies(trace, store, load_quality())
    rows = [["strategy", "avg_gpus", "peak_gpus", "slo_attainment_pct", "energy_per_token_j", "flags"]]
    for o in outcomes:
        rows.append([o.strategy, f"{o.avg_gpus:.1f}", o.peak_gpus,
                     f"{o.slo_attainment:.1f}", f"{o.energy_per_token:.6f}",
                     ";".join(o.flags)])
    _write_csv(rows, out)


# -- predict ------------------------------------------------------------------------

@main.group()
def predict() -> None:
    """Saturation-point prediction workflow."""


DEFAULT_ROW_MODELS = ("llama2-7b", "llama2-13b", "codellama-34b")
DEFAULT_ROW_METHODS = ("FP16", "W8A16-INT", "W4A16-INT", "W8A8-INT", "W8A8-FP", "W4A8", "W4A8KV4")
DEFAULT_ROW_GPUS = ("H100", "A100")
DEFAULT_ROW_INPUTS = (128, 256, 512, 1024)
DEFAULT_ROW_OUTPUTS = (64, 128, 256)


@predict.command("gen-rows")
@click.option("--out", required=True, type=click.Path())
@click.option("--models", default=",".join(DEFAULT_ROW_MODELS))
@click.option("--methods", default=",".join(DEFAULT_ROW_METHODS))
@click.option("--gpus", default=",".join(DEFAULT_ROW_GPUS))
@click.option("--inputs", default=",".join(map(str, DEFAULT_ROW_INPUTS)))
@click.option("--outputs", default=",".join(map(str, DEFAULT_ROW_OUTPUTS)))
@click.option("--qps-cap", default=128.0, type=float)
def predict_gen_rows(out: str, models: str, methods: str, gpus: str,
                     inputs: str, outputs: str, qps_cap: float) -> None:
    """Generate training rows by running the saturation search over a config grid."""
    rows = generate_rows(
        models=models.split(","), methods=methods.split(","), gpus=gpus.split(","),
        inputs=[int(v) for v in inputs.split(",")],
        outputs=[int(v) for v in outputs.split(",")],
        qps_cap=qps_cap,
    )
    write_rows_csv(rows, out)
    click.echo(f"{len(rows)} rows -> {out}")


def generate_rows(models, methods, gpus, inputs, outputs, qps_cap=128.0,
                  progress=None) -> list[FeatureRow]:
    from .model import LengthDist, WorkloadSpec

    ref = load_reference()
    slo = SloSpec(ttft_p90_max=1000, tpot_p90_max=200, max_error_rate=0.01)
    # probes must cover decode residence, which reaches tens of seconds for
    # large models at long outputs
    opts_probe = ProbeSpec(target_qps=1.0, duration=60.0, warmup=5.0)
    rows: list[FeatureRow] = []
    for model in models:
        for method in methods:
            for gpu in gpus:
                try:
                    config = ref.config(model, method, gpu, 1)
                    params = default_params(config)
                except ConfigError:
                    continue
                endpoint = DirectEndpoint(SimInstance(config, params))
                for in_len in inputs:
                    for out_len in outputs:
                        wl = WorkloadSpec(
                            id=f"len-{in_len}x{out_len}",
                            input_len=LengthDist(in_len), output_len=LengthDist(out_len),
                            qps=1.0, duration=30.0,
                        )
                        try:
                            sat = find_saturation(
                                endpoint, wl, slo,
                                SearchOpts(resolution=0.5, qps_cap=qps_cap, probe=opts_probe),
                                config_key=config.key,
                            )
                        except InfeasibleConfigError:
                            continue
                        m = config.method
                        rows.append(FeatureRow(
                            model_params=config.model.param_count,
                            weight_bits=m.weight_bits,
                            activation_bits=m.activation_bits,
                            kv_bits=m.kv_bits,
                            family_int=1 if m.numeric_family == "INT" else 0,
                            gpu=gpu,
                            input_len=in_len,
                            output_len=out_len,
                            tp_degree=1,
                            target=sat.saturation_qps,
                        ))
                        if progress is not None:
                            progress(rows[-1])
    return rows


@predict.command("train")
@click.option("--rows", "rows_file", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--regressor", default="tree", type=click.Choice(["tree", "knn"]))
@click.option("--seed", default=0, type=int)
def predict_train(rows_file: str, out: str, regressor: str, seed: int) -> None:
    rows = read_rows_csv(rows_file)
    model = train_model(rows, {"kind": regressor}, seed=seed)
    with open(out, "wb") as fh:
        pickle.dump(model, fh)
    click.echo(f"trained {regressor} on {len(rows)} rows -> {out}")


@predict.command("eval")
@click.option("--rows", "rows_file", required=True, type=click.Path(exists=True))
@click.option("--out", default="-")
@click.option("--seed", default=0, type=int)
def predict_eval(rows_file: str, out: str, seed: int) -> None:
    """Evaluate the preset split schemes and report MAPE per scheme."""
    rows = read_rows_csv(rows_file)
    input_lens = sorted({r.input_len for r in rows})
    output_lens = sorted({r.output_len for r in rows})
    gpus = sorted({r.gpu for r in rows})
    schemes = [random_split(0.2, seed=seed), random_split(0.1, seed=seed)]
    schemes += [leave_out_input_len(v) for v in input_lens[-1:]]
    schemes += [leave_out_output_len(v) for v in output_lens[-1:]]
    if len(gpus) == 2:
        schemes.append(cross_gpu(gpus[1], gpus[0]))
        schemes.append(cross_gpu(gpus[0], gpus[1]))
    report = evaluate_splits(rows, schemes, {"kind": "tree"}, seed=seed)
    if out == "-":
        for row in report:
            click.echo(f"{row['scheme']}: train={row['train_n']} test={row['test_n']} "
                       f"MAPE={row['mape']:.1f}%")
    else:
        report_csv(report, out)
        click.echo(f"report -> {out}")


# -- report -------------------------------------------------------------------------

EXPORT_COLUMNS = [
    "model", "method", "gpu", "tp", "workload", "kind", "target_qps",
    "achieved_qps", "ttft_p50_ms", "ttft_p90_ms", "tpot_p50_ms", "tpot_p90_ms",
    "energy_total_j", "tokens_total", "energy_per_token_j", "error_rate",
    "slo_pass", "saturation_qps",
]


@main.group()
def report() -> None:
    """Store exports for the plotting component."""


@report.command("export")
@click.option("--store", "store_path", required=True, type=click.Path(exists=True))
@click.option("--format", "fmt", default="csv", type=click.Choice(["csv"]))
@click.option("--out", default="-")
@click.option("--kinds", default="main,saturation")
def report_export(store_path: str, fmt: str, out: str, kinds: str) -> None:
    """Flatten the store into the documented CSV for external tooling."""
    store = ResultStore(store_path)
    wanted = set(kinds.split(","))
    rows = [EXPORT_COLUMNS]
    sats = {}
    for rec in store.by_kind("saturation"):
        sats[(rec["config_key"], rec["workload_id"])] = rec["data"]["saturation_qps"]
    for rec in sorted(store.records.values(), key=lambda r: r["key"]):
        if rec["kind"] not in wanted:
            continue
        model, method, gpu, tp = parse_config_key(rec["config_key"])
        d = rec["data"]
        sat = sats.get((rec["config_key"], rec["workload_id"]), "")
        if rec["kind"] == "saturation":
            rows.append([model, method, gpu, tp, rec["workload_id"], "saturation",
                         "", "", "", "", "", "", "", "", "", "", "",
                         d["saturation_qps"]])
        else:
            rows.append([
                model, method, gpu, tp, rec["workload_id"], rec["kind"],
                rec["target_qps"], d.get("achieved_qps", ""),
                _num(d.get("ttft_p50")), _num(d.get("ttft_p90")),
                _num(d.get("tpot_p50")), _num(d.get("tpot_p90")),
                d.get("energy_total", ""), d.get("tokens_total", ""),
                _num(d.get("energy_per_token")), d.get("error_rate", ""),
                int(bool(d.get("slo_pass"))), sat,
            ])
    _write_csv(rows, out)


def _num(v):
    if v is None:
        return ""
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def _write_csv(rows, out: str) -> None:
    if out == "-":
        w = csv.writer(sys.stdout)
        w.writerows(rows)
    else:
        with open(out, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
        click.echo(f"wrote {out}")


if __name__ == "__main__":
    main()
