"""Open-loop load generator and metrics collector.

Replays a workload against any engine speaking the wire protocol (the
in-process simulator, the HTTP facade, or a real engine) and produces one
BenchmarkResult. Arrivals are Poisson at the target rate and never wait on
completions; records sent during warmup are discarded; the energy counter is
read at warmup end and run end.
"""

from __future__ import annotations

import asyncio
import math
import time
from dataclasses import dataclass, replace

import aiohttp

from .engine.params import PerfModelParams
from .engine.sim import (
    EngineCrashedError,
    sample_arrival_times,
    sample_length_pairs,
    simulate_request_stream,
)
from .model import (
    BenchmarkResult,
    EngineConfig,
    RequestRecord,
    SloSpec,
    WorkloadSpec,
    check_slo,
    derive_latencies,
    percentile,
)


class EngineDownError(RuntimeError):
    """The engine was unreachable for the whole run (distinct from timeouts)."""


@dataclass(frozen=True)
class ProbeSpec:
    target_qps: float
    duration: float = 30.0
    warmup: float = 5.0
    client_timeout: float = 60.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.duration <= self.warmup:
            raise ValueError("probe requires duration > warmup")
        if self.target_qps <= 0:
            raise ValueError("target_qps must be positive")


def sample_lengths(workload: WorkloadSpec, n: int, seed: int | None = None) -> list[tuple[int, int]]:
    """Public length sampler; see engine.sim.sample_length_pairs."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return sample_length_pairs(workload, n, seed)


class SimInstance:
    """An in-process simulated engine instance, launchable by the supervisor.

    Faults are armed ahead of time for tests: crash_in_probe crashes the
    engine partway through the n-th run (1-based) after arming.
    """

    def __init__(self, config: EngineConfig, params: PerfModelParams):
        self.config = config
        self.params = params
        self.crashed = False
        self._crash_in_runs: int | None = None
        self._crash_frac = 0.5
        self._runs = 0

    def arm_crash(self, in_runs: int, frac: float = 0.5) -> None:
        self._crash_in_runs = in_runs
        self._crash_frac = frac

    def health(self) -> bool:
        return not self.crashed

    def run(self, workload: WorkloadSpec, *, drain: bool = False):
        if self.crashed:
            raise EngineDownError(f"engine for {self.config.key} is down")
        self._runs += 1
        crash_at = None
        if self._crash_in_runs is not None and self._runs >= self._crash_in_runs:
            crash_at = workload.duration * self._crash_frac
        try:
            return simulate_request_stream(workload, self.params, drain=drain, crash_at=crash_at)
        except EngineCrashedError as exc:
            self.crashed = True
            raise EngineDownError(str(exc)) from exc


class DirectEndpoint:
    """Benchmark endpoint backed by an in-process simulator instance.

    Runs in as-fast-as-possible mode: virtual probe seconds cost no wall time.
    """

    def __init__(self, instance: SimInstance):
        self.instance = instance

    def run_probe(self, workload: WorkloadSpec, probe: ProbeSpec):
        wl = workload.at(
            probe.target_qps, duration=probe.duration, warmup=probe.warmup, seed=probe.seed
        )
        run = self.instance.run(wl)
        energy = run.energy_between(probe.warmup, probe.duration)
        return run.records, energy


class ScriptedEndpoint:
    """Test double replaying records from a fixed script.

    The script maps request index -> (first_token_offset_s, completion_offset_s)
    or a callable building records outright.
    """

    def __init__(self, first_token_offset: float, per_token_time: float,
                 energy_rate: float = 100.0):
        self.first_token_offset = first_token_offset
        self.per_token_time = per_token_time
        self.energy_rate = energy_rate

    def run_probe(self, workload: WorkloadSpec, probe: ProbeSpec):
        times = sample_arrival_times(probe.target_qps, probe.duration, probe.seed, workload.arrival)
        pairs = sample_length_pairs(workload, len(times), probe.seed)
        records = []
        for t, (i, o) in zip(times, pairs):
            first = t + self.first_token_offset
            done = first + self.per_token_time * (o - 1)
            if done > probe.duration:
                records.append(RequestRecord(float(t), i, o, ok=False, error_kind="window"))
            else:
                records.append(RequestRecord(float(t), i, o, ok=True,
                                             first_token_time=first, completion_time=done))
        energy = self.energy_rate * (probe.duration - probe.warmup)
        return records, energy


class HttpEndpoint:
    """Benchmark endpoint speaking the wire protocol over HTTP."""

    def __init__(self, url: str):
        self.url = url.rstrip("/")

    def run_probe(self, workload: WorkloadSpec, probe: ProbeSpec):
        return asyncio.run(self._run(workload, probe))

    async def _read_energy(self, session: aiohttp.ClientSession) -> float:
        async with session.get(f"{self.url}/metrics/energy",
                               timeout=aiohttp.ClientTimeout(total=5)) as resp:
            return float(await resp.text())

    async def _stream_once(self, session, t0: float, body: dict):
        first = None
        done = None
        rejected = False
        async with session.post(f"{self.url}/v1/completions", json=body) as resp:
            resp.raise_for_status()
            async for raw in resp.content:
                line = raw.decode().strip()
                if line.startswith("event: token") and first is None:
                    first = time.perf_counter() - t0
                elif line.startswith("event: done"):
                    done = time.perf_counter() - t0
                elif line.startswith("event: error"):
                    rejected = True
                    break
        return first, done, rejected

    async def _one_request(self, session, send_at: float, t0: float,
                           in_tokens: int, out_tokens: int, timeout: float):
        now = time.perf_counter() - t0
        if send_at > now:
            await asyncio.sleep(send_at - now)
        body = {"prompt_tokens": in_tokens, "max_tokens": out_tokens, "stream": True}
        try:
            first, done, rejected = await asyncio.wait_for(
                self._stream_once(session, t0, body), timeout
            )
        except asyncio.TimeoutError:
            return RequestRecord(send_at, in_tokens, out_tokens, ok=False, error_kind="timeout")
        except (aiohttp.ClientConnectionError, aiohttp.ClientResponseError, OSError):
            return RequestRecord(send_at, in_tokens, out_tokens, ok=False, error_kind="connection")
        if rejected:
            return RequestRecord(send_at, in_tokens, out_tokens, ok=False, error_kind="rejected")
        if first is None or done is None:
            return RequestRecord(send_at, in_tokens, out_tokens, ok=False, error_kind="connection")
        return RequestRecord(send_at, in_tokens, out_tokens, ok=True,
                             first_token_time=max(first, send_at), completion_time=max(done, first))

    async def _run(self, workload: WorkloadSpec, probe: ProbeSpec):
        times = sample_arrival_times(probe.target_qps, probe.duration, probe.seed, workload.arrival)
        pairs = sample_length_pairs(workload, len(times), probe.seed)
        connector = aiohttp.TCPConnector(limit=0)
        records: list[RequestRecord] = []
        async with aiohttp.ClientSession(connector=connector) as session:
            t0 = time.perf_counter()
            tasks = [
                asyncio.create_task(
                    self._one_request(session, float(t), t0, i, o, probe.client_timeout)
                )
                for t, (i, o) in zip(times, pairs)
            ]

            async def read_at(offset: float) -> float:
                now = time.perf_counter() - t0
                if offset > now:
                    await asyncio.sleep(offset - now)
                return await self._read_energy(session)

            try:
                e_warm = await read_at(probe.warmup)
                # wait out the window, then cut off in-flight requests
                now = time.perf_counter() - t0
                if probe.duration > now:
                    await asyncio.sleep(probe.duration - now)
                e_end = await self._read_energy(session)
            except (aiohttp.ClientConnectionError, asyncio.TimeoutError, OSError) as exc:
                for t in tasks:
                    t.cancel()
                raise EngineDownError(f"energy counter unreachable: {exc}") from exc

            for task, t, (i, o) in zip(tasks, times, pairs):
                if task.done():
                    records.append(task.result())
                else:
                    task.cancel()
                    records.append(RequestRecord(float(t), i, o, ok=False, error_kind="window"))
            await asyncio.sleep(0)
        attempted = [r for r in records if r.error_kind != "window"]
        if attempted and all(r.error_kind == "connection" for r in attempted):
            raise EngineDownError(f"all {len(attempted)} requests failed to connect to {self.url}")
        return records, e_end - e_warm


def aggregate(records: list[RequestRecord], energy: float, config_key: str,
              workload_id: str, probe: ProbeSpec, slo: SloSpec,
              quality: float | None = None) -> BenchmarkResult:
    """Fold raw request records into a BenchmarkResult (warmup excluded)."""
    windowed = [r for r in records if r.send_time >= probe.warmup and r.error_kind != "window"]
    ok: list[RequestRecord] = []
    errors = 0
    for r in windowed:
        if r.ok and (r.first_token_time - r.send_time) > probe.client_timeout:
            errors += 1
        elif r.ok:
            ok.append(r)
        else:
            errors += 1
    ttfts: list[float] = []
    tpots: list[float] = []
    for r in ok:
        ttft, tpot = derive_latencies(r)
        ttfts.append(ttft)
        if tpot is not None:
            tpots.append(tpot)
    span = probe.duration - probe.warmup
    tokens_total = sum(r.output_tokens for r in ok)
    result = BenchmarkResult(
        config_key=config_key,
        workload_id=workload_id,
        target_qps=probe.target_qps,
        achieved_qps=len(ok) / span,
        ttft_p50=percentile(ttfts, 0.5) if ttfts else math.inf,
        ttft_p90=percentile(ttfts, 0.9) if ttfts else math.inf,
        tpot_p50=percentile(tpots, 0.5) if tpots else math.inf,
        tpot_p90=percentile(tpots, 0.9) if tpots else math.inf,
        energy_total=energy,
        tokens_total=tokens_total,
        energy_per_token=energy / tokens_total if tokens_total else math.inf,
        error_rate=errors / len(windowed) if windowed else 0.0,
        slo_pass=False,
        quality=quality,
    )
    return replace(result, slo_pass=check_slo(result, slo))


def run_benchmark(endpoint, workload: WorkloadSpec, probe: ProbeSpec, slo: SloSpec,
                  config_key: str = "", quality: float | None = None) -> BenchmarkResult:
    """Run one probe against an endpoint and compute its BenchmarkResult."""
    records, energy = endpoint.run_probe(workload, probe)
    return aggregate(records, energy, config_key or getattr(endpoint, "config_key", ""),
                     workload.id, probe, slo, quality)
