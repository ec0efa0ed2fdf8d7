"""Cluster-level case studies: energy-optimal data-parallel provisioning,
synthetic trace generation, and configuration-selection strategies.

All operations are pure functions over immutable profile data. Cluster
accounting provisions ceil(x / x_s) instances with the load balanced evenly,
which is optimal because the per-instance energy curve is convex and
monotonically decreasing.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import SloSpec
from .quality import QualityTable
from .refdata import ReferenceData, load_reference
from .store import ResultStore

log = logging.getLogger(__name__)

ENERGY_MONOTONE_TOL = 0.02  # relative non-monotonicity allowed in measured curves


def parse_config_key(key: str) -> tuple[str, str, str, int]:
    model, method, gpu, tp = key.split("/")
    return model, method, gpu, int(tp.removeprefix("tp"))


@dataclass(frozen=True)
class EnergyCurve:
    config_key: str
    workload_id: str
    saturation_qps: float
    samples: tuple  # ((qps, energy_per_token), ...) sorted by qps
    latency: tuple = ()  # ((qps, ttft_p90_ms, tpot_p90_ms), ...)

    @property
    def model(self) -> str:
        return parse_config_key(self.config_key)[0]

    @property
    def method(self) -> str:
        return parse_config_key(self.config_key)[1]

    @property
    def gpu(self) -> str:
        return parse_config_key(self.config_key)[2]

    @property
    def tp_degree(self) -> int:
        return parse_config_key(self.config_key)[3]

    @property
    def energy_at_saturation(self) -> float:
        return self.samples[-1][1]


@dataclass(frozen=True)
class TraceEntry:
    timestamp: float
    rates: dict  # request type -> req/s
    lengths: dict  # request type -> list[(input_tokens, output_tokens)]


@dataclass(frozen=True)
class StrategyOutcome:
    strategy: str
    avg_gpus: float
    peak_gpus: int
    slo_attainment: float  # percent of requests meeting all SLOs
    energy_per_token: float
    flags: tuple = ()


def provision(x: float, x_s: float) -> tuple[int, float]:
    """Instances for demand x given per-instance saturation x_s, load balanced."""
    if x <= 0 or x_s <= 0:
        raise ValueError("x and x_s must be positive")
    n = math.ceil(x / x_s)
    return n, x / n


def interpolate(samples, q: float) -> float:
    """Energy lookup, piecewise-linear in 1/qps; clamps above the top sample.

    Energy curves follow a/q + b, which is exactly linear in the reciprocal
    load, so interpolating there keeps off-grid error tiny and makes
    q * e(q) piecewise-linear convex, which is what balanced-split
    optimality rests on.
    """
    qs = [s[0] for s in samples]
    vs = [s[1] for s in samples]
    if q < qs[0]:
        raise ValueError("below smallest sample")
    if q >= qs[-1]:
        return vs[-1]
    us = [1.0 / x for x in reversed(qs)]
    ws = list(reversed(vs))
    return float(np.interp(1.0 / q, us, ws))


def low_load_fit(samples) -> tuple[float, float]:
    """Fit e(q) = a/q + b through the two smallest samples."""
    (q1, e1), (q2, e2) = samples[0], samples[1]
    a = (e1 - e2) / (1.0 / q1 - 1.0 / q2)
    return a, e1 - a / q1


def curve_energy_at(curve: EnergyCurve, q: float) -> tuple[float, bool]:
    """Energy/token at load q; extrapolates below the smallest sample with the
    a/q + b fit (flagged)."""
    if q < curve.samples[0][0]:
        a, b = low_load_fit(curve.samples)
        return a / q + b, True
    return interpolate(curve.samples, q), False


def cluster_energy(curve: EnergyCurve, x: float) -> tuple[float, int, bool]:
    """(energy per token, total GPUs, extrapolated?) for demand x on DP replicas."""
    n, lam = provision(x, curve.saturation_qps)
    e, extrapolated = curve_energy_at(curve, lam)
    return e, n * curve.tp_degree, extrapolated


def latency_at(curve: EnergyCurve, q: float) -> tuple[float, float]:
    """(ttft_p90, tpot_p90) in ms interpolated from the profile samples."""
    if not curve.latency:
        return 0.0, 0.0
    qs = [s[0] for s in curve.latency]
    ttfts = [s[1] for s in curve.latency]
    tpots = [s[2] for s in curve.latency]
    q = min(max(q, qs[0]), qs[-1])
    return float(np.interp(q, qs, ttfts)), float(np.interp(q, qs, tpots))


def max_load_meeting(curve: EnergyCurve, slo: SloSpec) -> float:
    """Highest per-instance load at which interpolated latencies meet the SLO,
    capped at the saturation point. 0 if even the lowest sample violates."""
    lo_q = curve.latency[0][0] if curve.latency else curve.saturation_qps
    ttft, tpot = latency_at(curve, lo_q)
    if ttft > slo.ttft_p90_max or tpot > slo.tpot_p90_max:
        return 0.0
    ok = lo_q
    grid = np.linspace(lo_q, curve.saturation_qps, 65)
    for q in grid:
        ttft, tpot = latency_at(curve, float(q))
        if ttft <= slo.ttft_p90_max and tpot <= slo.tpot_p90_max:
            ok = float(q)
        else:
            break
    return min(ok, curve.saturation_qps)


def _convex_repair(points: list[tuple[float, float]]) -> list[tuple[float, float]] | None:
    """Project energy samples onto a convex curve in the g(q) = q*e(q) sense.

    Finite probe windows leave a few percent of length-sampling noise on each
    grid point; the underlying steady-state curve is convex (a/q + b plus a
    convex waste term), and downstream provisioning math relies on it. Pools
    adjacent slope violators (weighted PAVA), re-anchors by the weighted mean
    residual, and gives up (None) when the repair moves any point by more
    than 10%.
    """
    if len(points) < 3:
        return points
    qs = np.array([p[0] for p in points])
    g = qs * np.array([p[1] for p in points])
    widths = np.diff(qs)
    slopes = np.diff(g) / widths
    blocks = [[s, w] for s, w in zip(slopes, widths)]
    merged: list[list[float]] = []
    for blk in blocks:
        merged.append(list(blk))
        while len(merged) > 1 and merged[-2][0] > merged[-1][0]:
            s2, w2 = merged.pop()
            s1, w1 = merged.pop()
            merged.append([(s1 * w1 + s2 * w2) / (w1 + w2), w1 + w2])
    smooth = []
    i = 0
    for s, w in merged:
        used = 0.0
        while used < w - 1e-12 and i < len(widths):
            smooth.append(s)
            used += widths[i]
            i += 1
    g_hat = np.concatenate([[0.0], np.cumsum(np.array(smooth) * widths)]) + g[0]
    g_hat += float(np.average(g - g_hat, weights=qs))
    e_hat = g_hat / qs
    if np.max(np.abs(g_hat - g) / np.maximum(g, 1e-12)) > 0.10:
        return None
    return [(float(q), float(e)) for q, e in zip(qs, e_hat)]


def build_curves(store: ResultStore) -> list[EnergyCurve]:
    """Assemble per-(config, workload) energy curves from main-run records.

    Configs with fewer than 2 points are skipped; curves whose energy samples
    rise by more than 2% against the running minimum are rejected. Both cases
    log a warning. Accepted curves are convex-projected (see _convex_repair)
    so they honor the curve invariant downstream provisioning relies on.
    """
    groups: dict[tuple[str, str], list[dict]] = {}
    for rec in store.by_kind("main"):
        groups.setdefault((rec["config_key"], rec["workload_id"]), []).append(rec)
    curves = []
    for (config_key, workload_id), recs in sorted(groups.items()):
        recs.sort(key=lambda r: r["target_qps"])
        points = [
            (r["target_qps"], r["data"]["energy_per_token"])
            for r in recs
            if math.isfinite(r["data"]["energy_per_token"])
        ]
        if len(points) < 2:
            log.warning("skipping %s/%s: fewer than 2 usable grid points",
                        config_key, workload_id)
            continue
        running_min = math.inf
        monotone = True
        for _, e in points:
            if e > running_min * (1 + ENERGY_MONOTONE_TOL):
                monotone = False
                break
            running_min = min(running_min, e)
        if not monotone:
            log.warning("rejecting %s/%s: energy samples rise beyond %.0f%% tolerance",
                        config_key, workload_id, ENERGY_MONOTONE_TOL * 100)
            continue
        repaired = _convex_repair(points)
        if repaired is None:
            log.warning("rejecting %s/%s: convex projection moved samples beyond 10%%",
                        config_key, workload_id)
            continue
        points = repaired
        sat_rec = store.saturation_for(config_key, workload_id)
        sat = sat_rec["data"]["saturation_qps"] if sat_rec else points[-1][0]
        latency = tuple(
            (r["target_qps"], r["data"]["ttft_p90"], r["data"]["tpot_p90"]) for r in recs
        )
        curves.append(EnergyCurve(
            config_key=config_key,
            workload_id=workload_id,
            saturation_qps=sat,
            samples=tuple(points),
            latency=latency,
        ))
    return curves


@dataclass(frozen=True)
class RankedConfig:
    curve: EnergyCurve
    energy_per_token: float
    gpus: int
    per_instance_qps: float
    instances: int
    extrapolated: bool = False


def optimal_config(candidates: list[EnergyCurve], x: float, slo: SloSpec,
                   quality_floor: float | None = None,
                   quality_of=None) -> list[RankedConfig]:
    """Rank SLO-feasible candidates by cluster energy at demand x.

    Ties break toward fewer GPUs, then method name. quality_of maps a curve
    to its 0-100 score when a quality floor applies.
    """
    ranked = []
    for curve in candidates:
        n, lam = provision(x, curve.saturation_qps)
        ttft, tpot = latency_at(curve, lam)
        if ttft > slo.ttft_p90_max or tpot > slo.tpot_p90_max:
            continue
        if quality_floor is not None and quality_of is not None:
            if quality_of(curve) < quality_floor:
                continue
        e, extrapolated = curve_energy_at(curve, lam)
        ranked.append(RankedConfig(curve, e, n * curve.tp_degree, lam, n, extrapolated))
    if not ranked:
        raise ValueError("no feasible configuration")
    ranked.sort(key=lambda r: (r.energy_per_token, r.gpus, r.curve.method))
    return ranked


# -- synthetic trace --------------------------------------------------------------

REQUEST_TYPES = ("chat-S", "chat-R", "code", "summarization")
DEFAULT_MIX = {"chat-S": 0.52, "chat-R": 0.13, "code": 0.15, "summarization": 0.20}
TYPE_DATASET = {"chat-S": "sharegpt", "chat-R": "sharegpt",
                "code": "humaneval", "summarization": "newsqa"}
TRACE_LENGTH_DISPERSION = 0.5


@dataclass(frozen=True)
class TraceSpec:
    duration: float = 120.0
    aggregate_qps: float = 120.0
    mix: dict = field(default_factory=lambda: dict(DEFAULT_MIX))
    seed: int = 0
    interval: float = 1.0


def synth_trace(spec: TraceSpec, ref: ReferenceData | None = None) -> list[TraceEntry]:
    """Cluster-level trace: per-type rates around the mix shares plus request
    lengths sampled from each type's dataset descriptor."""
    missing = [t for t in REQUEST_TYPES if t not in spec.mix]
    if missing:
        raise ValueError(f"mix must cover all request types; missing {missing}")
    ref = ref or load_reference()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 0x7ACE])))
    entries = []
    steps = int(spec.duration / spec.interval)
    for k in range(steps):
        rates = {}
        lengths = {}
        for rtype in REQUEST_TYPES:
            base = spec.aggregate_qps * spec.mix[rtype]
            rate = base * float(rng.lognormal(mean=-0.05**2 / 2, sigma=0.05))
            rates[rtype] = rate
            ds = ref.dataset(TYPE_DATASET[rtype])
            n = int(rng.poisson(rate * spec.interval))
            mu_i = math.log(ds.input_mean) - TRACE_LENGTH_DISPERSION**2 / 2
            mu_o = math.log(ds.output_mean) - TRACE_LENGTH_DISPERSION**2 / 2
            ins = np.clip(np.rint(rng.lognormal(mu_i, TRACE_LENGTH_DISPERSION, n)), 1, 16384)
            outs = np.clip(np.rint(rng.lognormal(mu_o, TRACE_LENGTH_DISPERSION, n)), 1, 16384)
            lengths[rtype] = [(int(i), int(o)) for i, o in zip(ins, outs)]
        entries.append(TraceEntry(timestamp=k * spec.interval, rates=rates, lengths=lengths))
    return entries


# -- strategy evaluation ------------------------------------------------------------

DEFAULT_MODEL_MAP = {
    "chat-S": "llama2-13b",
    "chat-R": "llama2-70b",
    "code": "codellama-34b",
    "summarization": "llama2-13b",
}

# TTFT/TPOT in ms plus quality floor, per request type
DEFAULT_POOL_SLOS = {
    "chat-S": SloSpec(ttft_p90_max=1000, tpot_p90_max=200, quality_min=55, max_error_rate=1.0),
    "chat-R": SloSpec(ttft_p90_max=3000, tpot_p90_max=200, quality_min=50, max_error_rate=1.0),
    "code": SloSpec(ttft_p90_max=150, tpot_p90_max=200, quality_min=35, max_error_rate=1.0),
    "summarization": SloSpec(ttft_p90_max=5000, tpot_p90_max=200, quality_min=16, max_error_rate=1.0),
}

TYPE_TASK = {"chat-S": "chat-S", "chat-R": "chat-R", "code": "code",
             "summarization": "summarization"}

STRATEGIES = ("FP16-Only", "Quality-First", "Energy-First")


@dataclass
class _PoolChoice:
    curve: EnergyCurve | None
    instances_for: object  # Callable[[float], int]
    quality: float
    flags: tuple = ()


def _pool_candidates(curves: list[EnergyCurve], model: str, workload_id: str) -> list[EnergyCurve]:
    return [c for c in curves if c.model == model and c.workload_id == workload_id]


def _choose(strategy: str, cands: list[EnergyCurve], slo: SloSpec, task: str,
            quality: QualityTable, expected_x: float) -> _PoolChoice:
    """Pick one configuration per the strategy rule.

    FP16-Only / Quality-First first fix the method, then pick the
    energy-optimal (GPU, DP, TP) meeting the pool's latency SLO at expected
    demand. Energy-First picks the (method, GPU, TP) with the lowest energy
    per token at its saturation point.
    """
    def slo_capacity(curve: EnergyCurve) -> float:
        return max_load_meeting(curve, slo)

    def with_dp(curve: EnergyCurve) -> _PoolChoice:
        cap = slo_capacity(curve)
        q = quality.quality(curve.model, curve.method, task)
        if cap <= 0:
            return _PoolChoice(curve, lambda x: math.ceil(x / curve.saturation_qps), q,
                               flags=("latency-infeasible",))
        return _PoolChoice(curve, lambda x: math.ceil(x / cap), q)

    if not cands:
        return _PoolChoice(None, lambda x: 0, 0.0, flags=("no-config",))

    if strategy == "Energy-First":
        best = min(cands, key=lambda c: (c.energy_at_saturation, c.tp_degree, c.method))
        return with_dp(best)

    if strategy == "FP16-Only":
        pool = [c for c in cands if c.method == "FP16"]
    else:  # Quality-First: best-quality quantization method, then energy-optimal
        quantized = [c for c in cands if c.method != "FP16"]
        pool = quantized or cands
        best_q = max(quality.quality(c.model, c.method, task) for c in pool)
        pool = [c for c in pool if quality.quality(c.model, c.method, task) == best_q]
    if not pool:
        return _PoolChoice(None, lambda x: 0, 0.0, flags=("no-config",))

    # energy-optimal (GPU, DP, TP) among SLO-feasible plans at expected demand
    def plan_cost(curve: EnergyCurve):
        cap = slo_capacity(curve)
        if cap <= 0:
            return (math.inf, math.inf, curve.method)
        n = math.ceil(expected_x / cap)
        e, _ = curve_energy_at(curve, expected_x / n)
        return (e, n * curve.tp_degree, curve.method)

    best = min(pool, key=plan_cost)
    if plan_cost(best)[0] is math.inf:
        # nothing meets latency: fall back to the cheapest infeasible plan
        fallback = min(pool, key=lambda c: c.energy_at_saturation)
        choice = with_dp(fallback)
        return _PoolChoice(choice.curve, choice.instances_for, choice.quality,
                           flags=("latency-infeasible",))
    return with_dp(best)


def evaluate_strategies(
    trace: list[TraceEntry],
    store: ResultStore,
    quality: QualityTable,
    slos: dict | None = None,
    model_map: dict | None = None,
    pool_workloads: dict | None = None,
) -> list[StrategyOutcome]:
    """Apply the three selection strategies over the trace and account GPUs,
    request-weighted SLO attainment, and cluster energy per token."""
    slos = slos or DEFAULT_POOL_SLOS
    model_map = model_map or DEFAULT_MODEL_MAP
    pool_workloads = pool_workloads or {t: TYPE_DATASET[t] for t in REQUEST_TYPES}
    curves = build_curves(store)

    outcomes = []
    for strategy in STRATEGIES:
        gpus_by_step: list[int] = []
        attained = 0
        violated = 0
        energy = 0.0
        tokens = 0
        flags: set[str] = set()
        choices: dict[str, _PoolChoice] = {}
        expected = {
            rtype: max(1e-9, sum(e.rates[rtype] for e in trace) / max(1, len(trace)))
            for rtype in REQUEST_TYPES
        }
        for rtype in REQUEST_TYPES:
            cands = _pool_candidates(curves, model_map[rtype], pool_workloads[rtype])
            choices[rtype] = _choose(strategy, cands, slos[rtype], TYPE_TASK[rtype],
                                     quality, expected[rtype])
            flags.update(choices[rtype].flags)

        for entry in trace:
            step_gpus = 0
            for rtype in REQUEST_TYPES:
                choice = choices[rtype]
                slo = slos[rtype]
                n_req = len(entry.lengths[rtype])
                out_tokens = sum(o for _, o in entry.lengths[rtype])
                if choice.curve is None:
                    violated += n_req
                    continue
                x = entry.rates[rtype]
                n_inst = max(1, choice.instances_for(x))
                lam = x / n_inst
                step_gpus += n_inst * choice.curve.tp_degree
                ttft, tpot = latency_at(choice.curve, lam)
                e, _ = curve_energy_at(choice.curve, lam)
                ok = (
                    ttft <= slo.ttft_p90_max
                    and tpot <= slo.tpot_p90_max
                    and (slo.quality_min is None or choice.quality >= slo.quality_min)
                )
                if ok:
                    attained += n_req
                else:
                    violated += n_req
                energy += e * out_tokens
                tokens += out_tokens
            gpus_by_step.append(step_gpus)

        total = attained + violated
        outcomes.append(StrategyOutcome(
            strategy=strategy,
            avg_gpus=sum(gpus_by_step) / len(gpus_by_step) if gpus_by_step else 0.0,
            peak_gpus=max(gpus_by_step) if gpus_by_step else 0,
            slo_attainment=100.0 * attained / total if total else 0.0,
            energy_per_token=energy / tokens if tokens else math.inf,
            flags=tuple(sorted(flags)),
        ))
    return outcomes
