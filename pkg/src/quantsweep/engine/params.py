"""Performance-model coefficients for the simulated serving engine.

The simulator is a hybrid analytic/discrete-event model. A config maps to a
small coefficient set:

  prefill service time  = prefill_coeff * input_tokens * dequant * kv_overhead / tp_scale
  decode iteration time = decode_coeff * read_volume(weight_bits) * dequant
                          * kv_overhead / tp_scale             (shared by the batch)
  power while working   = tdp * tp * (idle_frac + (1 - idle_frac) * utilization)

prefill_coeff folds model size, GPU compute scale and an activation-bit
compute factor; decode_coeff folds model size and GPU bandwidth scale.
read_volume models the iteration's memory traffic: a weight-independent floor
(KV cache and activations) plus the weight read scaled by weight precision.
tp_scale is (2 * tp_efficiency)^log2(tp): each doubling of GPUs buys a
2*efficiency speedup.
"""

from __future__ import annotations

import importlib.resources
import math
from dataclasses import dataclass

import yaml

from ..model import ConfigError, EngineConfig, validate_config


@dataclass(frozen=True)
class PerfModelParams:
    prefill_coeff: float  # s per input token (method- and config-resolved)
    decode_coeff: float  # s per decode iteration before overheads
    dequant_overhead: float  # >= 1, multiplies prefill and decode
    kv_overhead: float  # >= 1 when kv_bits < 16, else 1
    read_volume_factor: float  # decode-side weight read scale, <= 1
    tp_efficiency: float
    idle_power_frac: float
    max_batch_tokens: int
    kv_bytes_per_token: float
    tp_degree: int
    tdp: float

    def __post_init__(self) -> None:
        if self.dequant_overhead < 1.0:
            raise ConfigError("dequant_overhead must be >= 1")
        if self.kv_overhead < 1.0:
            raise ConfigError("kv_overhead must be >= 1")
        if not 0.0 < self.tp_efficiency <= 1.0:
            raise ConfigError("tp_efficiency must be in (0, 1]")
        if self.max_batch_tokens < 1:
            raise ConfigError("config infeasible: no KV headroom")

    @property
    def tp_scale(self) -> float:
        return (2.0 * self.tp_efficiency) ** math.log2(self.tp_degree)

    @property
    def prefill_time_per_token(self) -> float:
        return self.prefill_coeff * self.dequant_overhead * self.kv_overhead / self.tp_scale

    @property
    def decode_step_time(self) -> float:
        return (
            self.decode_coeff
            * self.read_volume_factor
            * self.dequant_overhead
            * self.kv_overhead
            / self.tp_scale
        )

    @property
    def total_power(self) -> float:
        return self.tdp * self.tp_degree

    def scaled(self, factor: float) -> "PerfModelParams":
        """Copy with all service times multiplied by `factor` (fault injection)."""
        return PerfModelParams(
            prefill_coeff=self.prefill_coeff * factor,
            decode_coeff=self.decode_coeff * factor,
            dequant_overhead=self.dequant_overhead,
            kv_overhead=self.kv_overhead,
            read_volume_factor=self.read_volume_factor,
            tp_efficiency=self.tp_efficiency,
            idle_power_frac=self.idle_power_frac,
            max_batch_tokens=self.max_batch_tokens,
            kv_bytes_per_token=self.kv_bytes_per_token,
            tp_degree=self.tp_degree,
            tdp=self.tdp,
        )


class Calibration:
    def __init__(self, raw: dict):
        self.gpus = raw["gpus"]
        self.methods = raw["methods"]
        eng = raw["engine"]
        self.tp_efficiency = float(eng["tp_efficiency"])
        self.fixed_overhead_frac = float(eng["fixed_overhead_frac"])
        self.decode_read_floor = float(eng["decode_read_floor"])
        self.act_compute = {int(k): float(v) for k, v in eng["act_compute"].items()}
        self.reference_params = float(eng["reference_params"])


_cached: Calibration | None = None


def load_calibration(path: str | None = None) -> Calibration:
    global _cached
    if path is None:
        if _cached is None:
            text = importlib.resources.files("quantsweep.data").joinpath("calibration.yaml").read_text()
            _cached = Calibration(yaml.safe_load(text))
        return _cached
    with open(path) as fh:
        return Calibration(yaml.safe_load(fh))


def kv_headroom_bytes(config: EngineConfig, fixed_overhead_frac: float) -> float:
    """VRAM left for KV cache across the whole TP group."""
    total_vram = config.gpu.memory_capacity * config.tp_degree
    weight_bytes = config.model.param_count * config.method.weight_bits / 8
    fixed = fixed_overhead_frac * total_vram
    return total_vram - weight_bytes - fixed


def default_params(config: EngineConfig, calibration: Calibration | None = None) -> PerfModelParams:
    """Resolve simulator coefficients for a config from the shipped calibration."""
    cal = calibration or load_calibration()
    problems = validate_config(config)
    if problems:
        raise ConfigError("config infeasible: " + "; ".join(problems))

    gpu_row = cal.gpus.get(config.gpu.name)
    method_row = cal.methods.get(config.method.name)
    if gpu_row is None or method_row is None:
        raise ConfigError(
            f"missing calibration entry for ({config.method.name}, {config.gpu.name})"
        )

    size_scale = config.model.param_count / cal.reference_params
    act_factor = cal.act_compute[config.method.activation_bits]
    prefill_coeff = float(gpu_row["prefill_base"]) * size_scale * act_factor
    decode_coeff = float(gpu_row["decode_base"]) * size_scale
    read_volume = cal.decode_read_floor + (1.0 - cal.decode_read_floor) * (
        config.method.weight_bits / 16.0
    )

    kv_bytes_per_token = config.model.kv_bytes_per_token_fp16 * config.method.kv_bits / 16.0
    headroom = kv_headroom_bytes(config, cal.fixed_overhead_frac)
    max_batch_tokens = math.floor(headroom / kv_bytes_per_token)
    if max_batch_tokens < 1:
        raise ConfigError(f"config infeasible: no KV headroom for {config.key}")

    return PerfModelParams(
        prefill_coeff=prefill_coeff,
        decode_coeff=decode_coeff,
        dequant_overhead=float(method_row["dequant_overhead"]),
        kv_overhead=float(method_row["kv_overhead"]) if config.method.kv_compressed else 1.0,
        read_volume_factor=read_volume,
        tp_efficiency=cal.tp_efficiency,
        idle_power_frac=float(gpu_row["idle_power_frac"]),
        max_batch_tokens=max_batch_tokens,
        kv_bytes_per_token=kv_bytes_per_token,
        tp_degree=config.tp_degree,
        tdp=config.gpu.tdp,
    )
