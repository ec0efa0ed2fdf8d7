"""Discrete-event simulated serving engine with continuous batching.

The engine admits queued prefills whenever the KV token budget allows
(reserving input+output tokens per request, so the budget is never
exceeded), then advances the whole decode batch one token per iteration.
Iterations cost a fixed step time shared by the batch; prefills run serially
between iterations. Event processing jumps whole runs of iterations at once,
so cost scales with request count rather than token count.

Energy model: the engine draws idle_power_frac * TDP * tp at all times, plus
a work-proportional term while computing. Work is accounted in KV
token-seconds: a prefill contributes input_tokens * prefill_duration and a
decode iteration contributes the batch's resident KV tokens * step_time. The
cumulative energy counter is piecewise linear between events, so reads at
arbitrary times interpolate exactly. At steady load this yields energy per
token of the form a/qps + b: convex and monotonically decreasing.
"""

from __future__ import annotations

import heapq
import math
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from ..model import RequestRecord, WorkloadSpec
from .params import PerfModelParams

LENGTH_CLAMP = (1, 16384)


class EngineCrashedError(RuntimeError):
    """Raised when a scheduled fault terminates the engine mid-run."""


def sample_arrival_times(qps: float, duration: float, seed: int, arrival: str) -> np.ndarray:
    """Arrival times in [0, duration).

    Poisson arrivals are generated by scaling a rate-1 exponential stream by
    1/qps, so runs at different rates with the same seed see the same
    underlying request sequence, just compressed in time.
    """
    if arrival == "deterministic":
        n = math.ceil(duration * qps)
        return np.arange(n) / qps
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xA221])))
    # Draw in chunks until the scaled cumulative sum passes `duration`.
    times: list[np.ndarray] = []
    total = 0.0
    expected = max(16, int(duration * qps * 1.2) + 16)
    while total < duration * qps:
        chunk = rng.exponential(1.0, size=expected)
        times.append(chunk)
        total += float(chunk.sum())
        expected = max(16, expected // 2)
    cum = np.cumsum(np.concatenate(times)) / qps
    return cum[cum < duration]


def sample_length_pairs(workload: WorkloadSpec, n: int, seed: int | None = None) -> list[tuple[int, int]]:
    """(input_tokens, output_tokens) pairs; fixed dists return the constant,
    empirical dists draw lognormal samples around the configured mean,
    clamped to [1, 16384]."""
    if n < 1:
        return []
    use_seed = workload.seed if seed is None else seed
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([use_seed, 0x1E46])))
    lo, hi = LENGTH_CLAMP

    def draw(dist, count: int) -> np.ndarray:
        if dist.fixed:
            return np.full(count, int(round(dist.mean)))
        mu = math.log(dist.mean) - dist.dispersion**2 / 2.0
        vals = rng.lognormal(mean=mu, sigma=dist.dispersion, size=count)
        return np.clip(np.rint(vals), lo, hi).astype(int)

    ins = draw(workload.input_len, n)
    outs = draw(workload.output_len, n)
    return [(int(i), int(o)) for i, o in zip(ins, outs)]


@dataclass
class SimRun:
    records: list[RequestRecord]
    horizon: float
    checkpoints_t: list[float] = field(default_factory=list)
    checkpoints_j: list[float] = field(default_factory=list)
    peak_reserved_tokens: float = 0.0

    @property
    def energy_total(self) -> float:
        return self.checkpoints_j[-1] if self.checkpoints_j else 0.0

    def energy_at(self, t: float) -> float:
        """Cumulative joules at time t (piecewise-linear interpolation, exact)."""
        ts, js = self.checkpoints_t, self.checkpoints_j
        if not ts or t <= ts[0]:
            return 0.0
        if t >= ts[-1]:
            return js[-1]
        i = bisect_right(ts, t)
        t0, t1 = ts[i - 1], ts[i]
        j0, j1 = js[i - 1], js[i]
        if t1 == t0:
            return j1
        return j0 + (j1 - j0) * (t - t0) / (t1 - t0)

    def energy_between(self, t0: float, t1: float) -> float:
        return self.energy_at(t1) - self.energy_at(t0)


@dataclass
class _Req:
    idx: int
    send_time: float
    input_tokens: int
    output_tokens: int
    first_token_time: float | None = None
    completion_time: float | None = None
    rejected: bool = False


def simulate_request_stream(
    workload: WorkloadSpec,
    params: PerfModelParams,
    *,
    drain: bool = False,
    crash_at: float | None = None,
    arrivals_override: list[tuple[float, int, int]] | None = None,
) -> SimRun:
    """Run the engine over one workload and return records plus the energy trace.

    With drain=False the run is cut at workload.duration: requests still in
    flight get `window` records. With drain=True the engine runs until every
    admitted request completes (arrivals still stop at duration).
    """
    if arrivals_override is not None:
        arrivals = arrivals_override
    else:
        times = sample_arrival_times(workload.qps, workload.duration, workload.seed, workload.arrival)
        pairs = sample_length_pairs(workload, len(times))
        arrivals = [(float(t), i, o) for t, (i, o) in zip(times, pairs)]

    reqs = [_Req(k, t, i, o) for k, (t, i, o) in enumerate(arrivals)]

    st = params.decode_step_time
    pt = params.prefill_time_per_token
    budget = params.max_batch_tokens
    p0 = params.total_power
    f = params.idle_power_frac
    work_scale = (1.0 - f) * p0 / budget  # J per kv-token-second

    clock = 0.0
    work = 0.0  # kv token-seconds accumulated
    ck_t = [0.0]
    ck_j = [0.0]

    def checkpoint() -> None:
        j = f * p0 * clock + work_scale * work
        if clock > ck_t[-1]:
            ck_t.append(clock)
            ck_j.append(j)
        else:
            ck_j[-1] = j

    def crash_check() -> None:
        if crash_at is not None and clock >= crash_at:
            raise EngineCrashedError(f"engine crashed at t={crash_at:.3f}")

    queue: list[int] = []
    q_head = 0
    peak_reserved = [0.0]
    active: list[tuple[int, int]] = []  # (finish_iter, req idx)
    it_index = 0
    n_active = 0
    kv_base_sum = 0.0  # sum over active of (input_tokens + generated_so_far)
    start_iter: dict[int, int] = {}
    reserved = 0.0

    ptr = 0
    n_arr = len(reqs)
    horizon = workload.duration

    def ingest_due() -> None:
        nonlocal ptr
        while ptr < n_arr and reqs[ptr].send_time <= clock:
            queue.append(ptr)
            ptr += 1

    def admit() -> bool:
        """Admit queued prefills while the token budget allows. Returns True
        if the clock advanced (prefills ran)."""
        nonlocal q_head, clock, work, reserved, n_active, kv_base_sum
        advanced = False
        while q_head < len(queue):
            r = reqs[queue[q_head]]
            footprint = r.input_tokens + r.output_tokens
            if footprint > budget:
                r.rejected = True
                q_head += 1
                continue
            if reserved + footprint > budget:
                break
            q_head += 1
            reserved += footprint
            peak_reserved[0] = max(peak_reserved[0], reserved)
            dur = pt * r.input_tokens
            clock += dur
            work += r.input_tokens * dur
            crash_check()
            r.first_token_time = clock
            if r.output_tokens <= 1:
                r.completion_time = clock
                reserved -= footprint
            else:
                heapq.heappush(active, (it_index + r.output_tokens - 1, r.idx))
                start_iter[r.idx] = it_index
                n_active += 1
                kv_base_sum += r.input_tokens + 1
            checkpoint()
            advanced = True
        return advanced

    while True:
        ingest_due()
        if admit():
            continue  # clock moved; new arrivals may be due
        if not drain and clock >= horizon:
            break
        next_arrival = reqs[ptr].send_time if ptr < n_arr else math.inf

        if not active:
            if next_arrival is math.inf:
                if not drain and clock < horizon:
                    clock = horizon
                    checkpoint()
                break
            clock = next_arrival if drain else min(next_arrival, horizon)
            crash_check()
            checkpoint()
            continue

        # Jump k whole iterations: up to the earliest batch completion, the
        # next arrival's iteration boundary, or the horizon.
        k = active[0][0] - it_index
        if next_arrival < math.inf:
            k = min(k, max(1, math.ceil((next_arrival - clock) / st)))
        if not drain and clock + k * st > horizon:
            k = min(k, max(1, math.ceil((horizon - clock) / st)))
        span = k * st
        work += span * kv_base_sum + n_active * st * k * (k + 1) / 2.0
        kv_base_sum += n_active * k
        clock += span
        it_index += k
        crash_check()

        while active and active[0][0] <= it_index:
            _, idx = heapq.heappop(active)
            r = reqs[idx]
            r.completion_time = clock
            kv_base_sum -= r.input_tokens + r.output_tokens
            reserved -= r.input_tokens + r.output_tokens
            n_active -= 1
            del start_iter[idx]
        checkpoint()

    records = []
    for r in reqs:
        if r.rejected:
            records.append(RequestRecord(r.send_time, r.input_tokens, r.output_tokens,
                                         ok=False, error_kind="rejected"))
        elif r.completion_time is not None and (drain or r.completion_time <= horizon):
            records.append(RequestRecord(r.send_time, r.input_tokens, r.output_tokens,
                                         ok=True, first_token_time=r.first_token_time,
                                         completion_time=r.completion_time))
        else:
            records.append(RequestRecord(r.send_time, r.input_tokens, r.output_tokens,
                                         ok=False, error_kind="window"))
    return SimRun(records=records, horizon=horizon, checkpoints_t=ck_t, checkpoints_j=ck_j,
                  peak_reserved_tokens=peak_reserved[0])


def lognormal_sq_mean(mean: float, sigma: float) -> float:
    """E[X^2] for a lognormal with the given arithmetic mean."""
    return mean * mean * math.exp(sigma * sigma)


def mean_request_work(workload: WorkloadSpec, params: PerfModelParams) -> float:
    """Expected KV token-seconds of engine work per request.

    Prefill contributes in * (pt * in); decode iteration j (of out-1)
    contributes in + 1 + j resident tokens for step_time seconds.
    """
    pt = params.prefill_time_per_token
    st = params.decode_step_time
    i_m = workload.input_len.mean
    i_sq = lognormal_sq_mean(i_m, workload.input_len.dispersion)
    o_m = workload.output_len.mean
    o_sq = lognormal_sq_mean(o_m, workload.output_len.dispersion)
    prefill_work = pt * i_sq
    # E[(out-1)(in+1)] + E[sum_{j=1}^{out-1} j] with in, out independent
    decode_work = st * ((o_m - 1.0) * (i_m + 1.0) + (o_sq - o_m) / 2.0)
    return prefill_work + decode_work


def energy_per_token_curve(
    workload: WorkloadSpec, params: PerfModelParams, qps_grid: list[float]
) -> list[tuple[float, float]]:
    """The engine's steady-state energy law e(qps) = a/qps + b on a grid.

    a = idle power / mean output tokens; b = work energy per output token.
    Exactly convex and monotonically decreasing; probe measurements agree
    with it up to finite-window effects (see tests).
    """
    p0 = params.total_power
    f = params.idle_power_frac
    o_m = workload.output_len.mean
    w = mean_request_work(workload, params)
    a = f * p0 / o_m
    b = (1.0 - f) * p0 * w / (params.max_batch_tokens * o_m)
    return [(q, a / q + b) for q in qps_grid]


def analytic_capacity(workload: WorkloadSpec, params: PerfModelParams) -> float:
    """Utilization-bound throughput estimate (req/s); used for calibration.

    Per request: prefill time + its share of decode iterations, where the
    share is the request's slot-seconds divided by the token budget.
    """
    pt = params.prefill_time_per_token
    st = params.decode_step_time
    i_m = workload.input_len.mean
    o_m = workload.output_len.mean
    i_sq = lognormal_sq_mean(i_m, workload.input_len.dispersion)
    o_sq = lognormal_sq_mean(o_m, workload.output_len.dispersion)
    slot_tokens = i_m * o_m + o_sq  # E[out * (in + out)], in and out independent
    per_request = pt * i_m + st * slot_tokens / params.max_batch_tokens
    return 1.0 / per_request
