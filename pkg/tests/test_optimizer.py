import itertools
import math
import random

import pytest

from quantsweep.model import SloSpec
from quantsweep.optimizer import (
    DEFAULT_MIX,
    EnergyCurve,
    TraceSpec,
    build_curves,
    cluster_energy,
    curve_energy_at,
    evaluate_strategies,
    interpolate,
    low_load_fit,
    optimal_config,
    provision,
    synth_trace,
)
from quantsweep.quality import load_quality
from quantsweep.store import ResultStore

SLO = SloSpec(ttft_p90_max=1000, tpot_p90_max=200, max_error_rate=0.01)


def synthetic_curve(a=2.0, b=0.05, x_s=10.0, knots=10, key="llama2-13b/W4A8/H100/tp1",
                    ttft=100.0, tpot=50.0, workload="w"):
    qs = [x_s * (k + 1) / knots for k in range(knots)]
    samples = tuple((q, a / q + b) for q in qs)
    latency = tuple((q, ttft, tpot) for q in qs)
    return EnergyCurve(key, workload, x_s, samples, latency)


# -- provision -------------------------------------------------------------------

def test_provision_examples():
    assert provision(25, 10) == (3, pytest.approx(25 / 3))
    assert provision(10, 10) == (1, 10.0)
    n, lam = provision(10.01, 10)
    assert n == 2
    assert lam == pytest.approx(5.005)


def test_provision_minimality_oracle():
    rng = random.Random(1)
    for _ in range(1000):
        x = rng.uniform(0.1, 300)
        x_s = rng.uniform(0.1, 50)
        n, lam = provision(x, x_s)
        assert lam <= x_s + 1e-12
        # minimal-n oracle: smallest integer with x/n <= x_s
        oracle = 1
        while x / oracle > x_s:
            oracle += 1
        assert n == oracle


# -- cluster energy ----------------------------------------------------------------

def test_cluster_energy_closed_form_example():
    curve = synthetic_curve(a=2.0, b=0.05, x_s=10.0, knots=10,
                            key="llama2-13b/W4A8/H100/tp2")
    e, gpus, extrapolated = cluster_energy(curve, 25.0)
    assert e == pytest.approx(0.290, abs=0.005)
    assert gpus == 6  # 3 instances x TP2
    assert not extrapolated


def test_cluster_energy_at_exact_saturation():
    curve = synthetic_curve(x_s=10.0, key="llama2-13b/W4A8/H100/tp4")
    e, gpus, _ = cluster_energy(curve, 10.0)
    assert e == pytest.approx(2.0 / 10.0 + 0.05)
    assert gpus == 4


def test_extrapolation_below_smallest_sample_flagged():
    curve = synthetic_curve(a=2.0, b=0.05, x_s=10.0, knots=5)  # smallest sample at 2.0
    e, flagged = curve_energy_at(curve, 0.5)
    assert flagged
    assert e == pytest.approx(2.0 / 0.5 + 0.05, rel=0.01)  # a/q+b fit is exact here
    a, b = low_load_fit(curve.samples)
    assert a == pytest.approx(2.0)
    assert b == pytest.approx(0.05)


def brute_splits(x, n, step=0.5, cap=10.0):
    vals = [v * step for v in range(1, int(cap / step) + 1)]
    for combo in itertools.product(vals, repeat=n - 1):
        last = round(x - sum(combo), 6)
        if 0 < last <= cap:
            yield combo + (last,)


def test_balanced_split_never_beaten():
    # exact a/q+b curve: every split ties (q*e(q) is affine); balanced never loses
    curve = synthetic_curve(a=2.0, b=0.05, x_s=10.0, knots=10)

    def total(c, split):
        return sum(curve_energy_at(c, xi)[0] * xi for xi in split)

    for n in (2, 3, 4):
        x = n * 5.0
        balanced = total(curve, [x / n] * n)
        for split in brute_splits(x, n):
            if len(set(split)) == 1:
                continue
            assert total(curve, split) >= balanced - 1e-9


def test_balanced_split_strictly_wins_on_strictly_convex_curve():
    # measured curves bend above a/q+b near saturation; then Jensen is strict
    qs = [1.0 + k for k in range(10)]
    samples = tuple((q, 2.0 / q + 0.05 + 0.01 * q) for q in qs)
    curve = EnergyCurve("llama2-13b/W4A8/H100/tp1", "w", 10.0, samples)

    def total(split):
        return sum(curve_energy_at(curve, xi)[0] * xi for xi in split)

    for n in (3, 4):
        x = n * 5.0
        balanced = total([x / n] * n)
        for split in brute_splits(x, n):
            if len(set(split)) == 1:
                continue
            assert total(split) > balanced + 1e-9


# -- optimal_config -----------------------------------------------------------------

def test_optimal_config_tie_breaks_on_gpus():
    cheap4 = synthetic_curve(key="llama2-13b/W4A8/H100/tp4", workload="w")
    cheap8 = synthetic_curve(key="llama2-13b/W4A8/H100/tp8", workload="w")
    ranked = optimal_config([cheap8, cheap4], x=5.0, slo=SLO)
    assert ranked[0].curve.tp_degree == 4


def test_optimal_config_quality_floor_excludes_cheapest():
    cheap = synthetic_curve(a=1.0, key="llama2-13b/W8A8KV8-INT/H100/tp1")
    costly = synthetic_curve(a=4.0, key="llama2-13b/W8A16-INT/H100/tp1")
    quality = {"W8A8KV8-INT": 50.48, "W8A16-INT": 59.33}
    ranked = optimal_config(
        [cheap, costly], x=5.0, slo=SLO, quality_floor=55.0,
        quality_of=lambda c: quality[c.method],
    )
    assert [r.curve.method for r in ranked] == ["W8A16-INT"]


def test_optimal_config_latency_filter_and_empty_error():
    slow = synthetic_curve(ttft=5000.0, key="llama2-13b/FP16/H100/tp1")
    with pytest.raises(ValueError, match="no feasible configuration"):
        optimal_config([slow], x=5.0, slo=SLO)


# -- synthetic trace -----------------------------------------------------------------

def test_trace_rates_follow_mix():
    mix = {"chat-S": 0.48, "chat-R": 0.12, "code": 0.2, "summarization": 0.2}
    trace = synth_trace(TraceSpec(duration=200, aggregate_qps=100, mix=mix, seed=3))
    means = {t: sum(e.rates[t] for e in trace) / len(trace) for t in mix}
    assert means["chat-S"] == pytest.approx(48, rel=0.02)
    assert means["chat-R"] == pytest.approx(12, rel=0.02)
    assert means["code"] == pytest.approx(20, rel=0.02)
    assert means["summarization"] == pytest.approx(20, rel=0.02)
    assert means["chat-S"] / means["chat-R"] == pytest.approx(4.0, rel=0.05)


def test_trace_chat_s_share_between_50_and_60_percent():
    trace = synth_trace(TraceSpec(duration=300, aggregate_qps=120, seed=7))
    counts = {t: sum(len(e.lengths[t]) for e in trace) for t in DEFAULT_MIX}
    share = counts["chat-S"] / sum(counts.values())
    assert 0.50 <= share <= 0.60


def test_trace_deterministic_given_seed():
    a = synth_trace(TraceSpec(duration=30, aggregate_qps=110, seed=5))
    b = synth_trace(TraceSpec(duration=30, aggregate_qps=110, seed=5))
    assert a == b


def test_trace_requires_full_mix():
    with pytest.raises(ValueError, match="missing"):
        synth_trace(TraceSpec(mix={"chat-S": 1.0}))


def test_trace_lengths_track_dataset_descriptors():
    trace = synth_trace(TraceSpec(duration=300, aggregate_qps=120, seed=11))
    code = [p for e in trace for p in e.lengths["code"]]
    in_mean = sum(p[0] for p in code) / len(code)
    out_mean = sum(p[1] for p in code) / len(code)
    assert in_mean == pytest.approx(193, rel=0.05)
    assert out_mean == pytest.approx(67, rel=0.05)


# -- build_curves ----------------------------------------------------------------------

def add_main(store, key, wid, qps, e, ttft=100.0, tpot=50.0):
    store.append("main", key, wid, qps, {
        "energy_per_token": e, "ttft_p90": ttft, "tpot_p90": tpot,
    })


def test_build_curves_eight_point_grid(tmp_path):
    store = ResultStore(tmp_path / "s.jsonl")
    for k in range(8):
        q = 1.0 + k
        add_main(store, "llama2-13b/FP16/H100/tp1", "w", q, 2.0 / q + 0.05)
    store.append("saturation", "llama2-13b/FP16/H100/tp1", "w", None,
                 {"saturation_qps": 8.0, "resolution": 0.25, "probes": [], "unsaturated": False})
    curves = build_curves(store)
    assert len(curves) == 1
    assert len(curves[0].samples) == 8
    assert curves[0].saturation_qps == 8.0


def test_build_curves_interpolation_error_under_one_percent(tmp_path):
    store = ResultStore(tmp_path / "s.jsonl")
    a, b = 2.0, 0.05
    for k in range(8):
        q = 1.0 + k * 9.0 / 7.0  # spread over [1, 10]
        add_main(store, "llama2-13b/FP16/H100/tp1", "w", q, a / q + b)
    curve = build_curves(store)[0]
    rng = random.Random(2)
    for _ in range(100):
        q = rng.uniform(1.0, 10.0)
        assert interpolate(curve.samples, q) == pytest.approx(a / q + b, rel=0.01)


def test_build_curves_rejects_five_percent_blip(tmp_path):
    store = ResultStore(tmp_path / "s.jsonl")
    es = [2.0, 1.0, 0.7, 0.735, 0.5]  # 5% rise at the 4th point
    for q, e in zip(range(1, 6), es):
        add_main(store, "llama2-13b/FP16/H100/tp1", "w", float(q), e)
    assert build_curves(store) == []


def test_build_curves_skips_single_point(tmp_path):
    store = ResultStore(tmp_path / "s.jsonl")
    add_main(store, "llama2-13b/FP16/H100/tp1", "w", 1.0, 0.5)
    assert build_curves(store) == []


# -- strategies (degenerate store) --------------------------------------------------------

def test_degenerate_fp16_only_store_gives_identical_outcomes(tmp_path):
    store = ResultStore(tmp_path / "s.jsonl")
    for model, wid in (("llama2-13b", "sharegpt"), ("llama2-70b", "sharegpt"),
                       ("codellama-34b", "humaneval"), ("llama2-13b", "newsqa")):
        key = f"{model}/FP16/H100/tp1"
        for k in range(6):
            q = 2.0 + 3 * k
            add_main(store, key, wid, q, 3.0 / q + 0.08, ttft=50.0, tpot=30.0)
        store.append("saturation", key, wid, None,
                     {"saturation_qps": 17.0, "resolution": 0.25, "probes": [],
                      "unsaturated": False})
    trace = synth_trace(TraceSpec(duration=20, aggregate_qps=110, seed=1))
    outcomes = evaluate_strategies(trace, store, load_quality())
    assert len(outcomes) == 3
    first = outcomes[0]
    for o in outcomes[1:]:
        assert o.avg_gpus == first.avg_gpus
        assert o.slo_attainment == first.slo_attainment
        assert o.energy_per_token == pytest.approx(first.energy_per_token)
