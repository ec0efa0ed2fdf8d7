"""Saturation-point search: exponential bracketing plus binary search.

The search assumes slo_pass is nonincreasing in qps (guaranteed by the
simulator's latency monotonicity; with stochastic probes the bracket is
trusted without re-probing, keeping the probe count bounded).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

from .benchmark import EngineDownError, ProbeSpec, run_benchmark
from .model import BenchmarkResult, SaturationResult, SloSpec, WorkloadSpec


class InfeasibleConfigError(RuntimeError):
    """The qps=1 probe already violates the SLO."""

    def __init__(self, result: BenchmarkResult):
        super().__init__(
            f"config {result.config_key!r} fails SLO at 1 req/s "
            f"(ttft_p90={result.ttft_p90:.0f} ms, tpot_p90={result.tpot_p90:.0f} ms, "
            f"err={result.error_rate:.2f})"
        )
        self.result = result


@dataclass(frozen=True)
class SearchOpts:
    resolution: float = 0.25
    qps_cap: float = 512.0
    probe: ProbeSpec = ProbeSpec(target_qps=1.0, duration=30.0, warmup=5.0)

    def __post_init__(self) -> None:
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.qps_cap < 1:
            raise ValueError("qps_cap must be >= 1")


def probe_seed(config_key: str, workload_id: str) -> int:
    digest = hashlib.sha256(f"{config_key}|{workload_id}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def find_saturation(
    endpoint,
    workload: WorkloadSpec,
    slo: SloSpec,
    opts: SearchOpts | None = None,
    *,
    config_key: str = "",
    on_probe=None,
    on_engine_down=None,
) -> SaturationResult:
    """Highest SLO-attaining qps for one config.

    Phase 1 doubles qps from 1 until a probe fails or qps_cap is reached
    (returning the cap flagged unsaturated if it still passes). Phase 2
    bisects [last passing, first failing] down to `resolution` and returns
    the last passing qps. `on_probe(result)` observes every probe;
    `on_engine_down()` is awaited-on-return before the same probe retries
    (the engine-handler wires a wait-until-healthy there).
    """
    opts = opts or SearchOpts()
    key = config_key or getattr(endpoint, "config_key", "")
    seed = probe_seed(key, workload.id)
    probes: list[tuple[float, bool]] = []

    def run_probe_at(qps: float) -> BenchmarkResult:
        spec = replace(opts.probe, target_qps=qps, seed=seed)
        while True:
            try:
                result = run_benchmark(endpoint, workload, spec, slo, config_key=key)
            except EngineDownError:
                if on_engine_down is None:
                    raise
                on_engine_down()
                continue
            probes.append((qps, result.slo_pass))
            if on_probe is not None:
                on_probe(result)
            return result

    first = run_probe_at(1.0)
    if not first.slo_pass:
        raise InfeasibleConfigError(first)

    lo, hi = 1.0, None
    qps = 1.0
    while hi is None:
        qps = min(qps * 2, opts.qps_cap)
        result = run_probe_at(qps)
        if not result.slo_pass:
            hi = qps
        elif qps >= opts.qps_cap:
            return SaturationResult(
                config_key=key,
                workload_id=workload.id,
                saturation_qps=opts.qps_cap,
                resolution=opts.resolution,
                probes=tuple(probes),
                unsaturated=True,
            )
        else:
            lo = qps

    while hi - lo > opts.resolution:
        mid = (lo + hi) / 2
        if run_probe_at(mid).slo_pass:
            lo = mid
        else:
            hi = mid

    return SaturationResult(
        config_key=key,
        workload_id=workload.id,
        saturation_qps=lo,
        resolution=opts.resolution,
        probes=tuple(probes),
    )
