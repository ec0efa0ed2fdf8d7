"""Domain vocabulary: configurations, workloads, SLOs, metrics.

All types are frozen value records, safe to share between tasks. The
operations here are pure and shared by every other module.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """Raised for invalid configurations or malformed reference data."""


_NAME_RE = re.compile(r"^W(?P<w>\d+)A(?P<a>\d+)(?:KV(?P<kv>\d+))?(?:-(?P<fam>INT|FP))?$")


def decode_method_name(name: str) -> tuple[int, int, int, str]:
    """Decode a method name into (weight_bits, activation_bits, kv_bits, family).

    FP16 is the full-precision baseline; names without an explicit -INT/-FP
    suffix (W4A8, W4A8KV4, W4A8KV8) are integer-weight schemes.
    """
    if name == "FP16":
        return 16, 16, 16, "FP"
    m = _NAME_RE.match(name)
    if not m:
        raise ConfigError(f"cannot decode method name {name!r}")
    w = int(m.group("w"))
    a = int(m.group("a"))
    kv = int(m.group("kv")) if m.group("kv") else 16
    fam = m.group("fam") or "INT"
    return w, a, kv, fam


@dataclass(frozen=True)
class QuantMethod:
    name: str
    weight_bits: int
    activation_bits: int
    kv_bits: int
    numeric_family: str

    def __post_init__(self) -> None:
        if self.weight_bits not in (4, 8, 16):
            raise ConfigError(f"{self.name}: weight_bits must be 4, 8 or 16")
        if self.activation_bits not in (8, 16):
            raise ConfigError(f"{self.name}: activation_bits must be 8 or 16")
        if self.kv_bits not in (4, 8, 16):
            raise ConfigError(f"{self.name}: kv_bits must be 4, 8 or 16")
        if self.numeric_family not in ("INT", "FP"):
            raise ConfigError(f"{self.name}: family must be INT or FP")
        decoded = decode_method_name(self.name)
        if decoded != (self.weight_bits, self.activation_bits, self.kv_bits, self.numeric_family):
            raise ConfigError(
                f"{self.name}: declared bits {decoded_repr(self)} do not match name decoding {decoded}"
            )

    @property
    def kv_compressed(self) -> bool:
        return self.kv_bits < 16

    @property
    def weight_only(self) -> bool:
        return self.activation_bits == 16 and self.weight_bits < 16

    @property
    def is_fp8(self) -> bool:
        """FP8 compute paths; only available on H100."""
        return self.numeric_family == "FP" and self.name != "FP16"

    def non_kv_counterpart(self) -> str:
        """Name of the same scheme without KV cache compression."""
        if not self.kv_compressed:
            return self.name
        base = re.sub(r"KV\d+", "", self.name)
        if base == "W8A16-INT" or base == "W4A16-INT":
            return base
        # W8A8KV8-INT -> W8A8-INT, W4A8KV4 -> W4A8, etc.
        return base


def decoded_repr(m: QuantMethod) -> tuple[int, int, int, str]:
    return m.weight_bits, m.activation_bits, m.kv_bits, m.numeric_family


@dataclass(frozen=True)
class GpuSpec:
    name: str
    memory_capacity: int  # bytes
    fp16_tflops: float
    int8_tops: float
    memory_bandwidth: float  # bytes/s
    tdp: float  # watts


@dataclass(frozen=True)
class ModelSpec:
    name: str
    param_count: int
    kv_bytes_per_token_fp16: float

    def __post_init__(self) -> None:
        if self.param_count <= 0:
            raise ConfigError(f"{self.name}: param_count must be positive")
        if self.kv_bytes_per_token_fp16 <= 0:
            raise ConfigError(f"{self.name}: kv_bytes_per_token_fp16 must be positive")


@dataclass(frozen=True)
class EngineConfig:
    model: ModelSpec
    method: QuantMethod
    gpu: GpuSpec
    tp_degree: int
    workload_id: str = ""

    def __post_init__(self) -> None:
        if self.tp_degree not in (1, 2, 4, 8):
            raise ConfigError(f"tp_degree must be one of 1/2/4/8, got {self.tp_degree}")

    @property
    def weight_bytes_per_gpu(self) -> float:
        return self.model.param_count * (self.method.weight_bits / 8) / self.tp_degree

    @property
    def key(self) -> str:
        return f"{self.model.name}/{self.method.name}/{self.gpu.name}/tp{self.tp_degree}"


def validate_config(config: EngineConfig) -> list[str]:
    """Return a list of human-readable reasons the config is invalid (empty if valid)."""
    problems = []
    if config.weight_bytes_per_gpu >= config.gpu.memory_capacity:
        problems.append(
            f"{config.key}: weights need {config.weight_bytes_per_gpu / 1e9:.1f} GB per GPU, "
            f"exceeding {config.gpu.memory_capacity / 1e9:.0f} GB capacity"
        )
    if config.method.is_fp8 and config.gpu.name != "H100":
        problems.append(
            f"{config.key}: {config.method.name} requires H100 for FP8 compute compatibility"
        )
    return problems


def config_fingerprint(config: EngineConfig) -> str:
    """Stable short hash of the canonicalized config record."""
    canon = {
        "model": config.model.name,
        "method": config.method.name,
        "gpu": config.gpu.name,
        "tp": config.tp_degree,
    }
    digest = hashlib.sha256(json.dumps(canon, sort_keys=True).encode()).hexdigest()
    return digest[:12]


@dataclass(frozen=True)
class LengthDist:
    """Token-length distribution: a fixed value, or lognormal mean+dispersion."""

    mean: float
    dispersion: float = 0.0  # sigma of the underlying normal; 0 = fixed

    def __post_init__(self) -> None:
        if self.mean <= 0:
            raise ConfigError("length mean must be positive")
        if self.dispersion < 0:
            raise ConfigError("dispersion must be >= 0")

    @property
    def fixed(self) -> bool:
        return self.dispersion == 0.0


@dataclass(frozen=True)
class WorkloadSpec:
    id: str
    input_len: LengthDist
    output_len: LengthDist
    qps: float
    duration: float
    warmup: float = 0.0
    seed: int = 0
    arrival: str = "poisson"  # poisson | deterministic

    def __post_init__(self) -> None:
        if self.duration <= self.warmup or self.warmup < 0:
            raise ConfigError("workload requires duration > warmup >= 0")
        if self.arrival not in ("poisson", "deterministic"):
            raise ConfigError(f"unknown arrival process {self.arrival!r}")

    def at(self, qps: float, *, duration: float | None = None, warmup: float | None = None,
           seed: int | None = None, arrival: str | None = None) -> "WorkloadSpec":
        """Copy with a different rate (and optionally probe timing/seed)."""
        return WorkloadSpec(
            id=self.id,
            input_len=self.input_len,
            output_len=self.output_len,
            qps=qps,
            duration=self.duration if duration is None else duration,
            warmup=self.warmup if warmup is None else warmup,
            seed=self.seed if seed is None else seed,
            arrival=self.arrival if arrival is None else arrival,
        )


@dataclass(frozen=True)
class SloSpec:
    ttft_p90_max: float  # ms
    tpot_p90_max: float  # ms
    quality_min: float | None = None  # 0-100, checked only where a score is attached
    max_error_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.ttft_p90_max <= 0 or self.tpot_p90_max <= 0:
            raise ConfigError("SLO thresholds must be positive")
        if not 0.0 <= self.max_error_rate <= 1.0:
            raise ConfigError("max_error_rate must be in [0, 1]")


@dataclass(frozen=True)
class RequestRecord:
    send_time: float  # s
    input_tokens: int
    output_tokens: int
    ok: bool
    first_token_time: float | None = None  # s, absent on failure
    completion_time: float | None = None  # s, absent on failure
    error_kind: str | None = None  # timeout | connection | crash | rejected | window

    def __post_init__(self) -> None:
        if self.ok:
            if self.first_token_time is None or self.completion_time is None:
                raise ConfigError("ok record must carry first_token_time and completion_time")
            if not (self.send_time <= self.first_token_time <= self.completion_time):
                raise ConfigError("record violates send <= first_token <= completion ordering")
            if self.output_tokens < 1:
                raise ConfigError("ok record must have output_tokens >= 1")


@dataclass(frozen=True)
class BenchmarkResult:
    config_key: str
    workload_id: str
    target_qps: float
    achieved_qps: float
    ttft_p50: float  # ms; +inf when no request succeeded
    ttft_p90: float
    tpot_p50: float
    tpot_p90: float
    energy_total: float  # J over the measured window
    tokens_total: int
    energy_per_token: float
    error_rate: float
    slo_pass: bool
    quality: float | None = None

    def to_dict(self) -> dict:
        d = {
            "config_key": self.config_key,
            "workload_id": self.workload_id,
            "target_qps": self.target_qps,
            "achieved_qps": self.achieved_qps,
            "ttft_p50": self.ttft_p50,
            "ttft_p90": self.ttft_p90,
            "tpot_p50": self.tpot_p50,
            "tpot_p90": self.tpot_p90,
            "energy_total": self.energy_total,
            "tokens_total": self.tokens_total,
            "energy_per_token": self.energy_per_token,
            "error_rate": self.error_rate,
            "slo_pass": self.slo_pass,
        }
        if self.quality is not None:
            d["quality"] = self.quality
        return d

    @staticmethod
    def from_dict(d: dict) -> "BenchmarkResult":
        return BenchmarkResult(
            config_key=d["config_key"],
            workload_id=d["workload_id"],
            target_qps=d["target_qps"],
            achieved_qps=d["achieved_qps"],
            ttft_p50=d["ttft_p50"],
            ttft_p90=d["ttft_p90"],
            tpot_p50=d["tpot_p50"],
            tpot_p90=d["tpot_p90"],
            energy_total=d["energy_total"],
            tokens_total=d["tokens_total"],
            energy_per_token=d["energy_per_token"],
            error_rate=d["error_rate"],
            slo_pass=d["slo_pass"],
            quality=d.get("quality"),
        )


@dataclass(frozen=True)
class SaturationResult:
    config_key: str
    workload_id: str
    saturation_qps: float
    resolution: float
    probes: tuple = field(default_factory=tuple)  # ((qps, slo_pass), ...)
    unsaturated: bool = False  # search cap reached while still passing

    def to_dict(self) -> dict:
        return {
            "config_key": self.config_key,
            "workload_id": self.workload_id,
            "saturation_qps": self.saturation_qps,
            "resolution": self.resolution,
            "probes": [[q, bool(p)] for q, p in self.probes],
            "unsaturated": self.unsaturated,
        }

    @staticmethod
    def from_dict(d: dict) -> "SaturationResult":
        return SaturationResult(
            config_key=d["config_key"],
            workload_id=d["workload_id"],
            saturation_qps=d["saturation_qps"],
            resolution=d["resolution"],
            probes=tuple((q, bool(p)) for q, p in d.get("probes", [])),
            unsaturated=d.get("unsaturated", False),
        )


def percentile(samples: list[float], p: float) -> float:
    """Nearest-rank percentile: the ceil(p*n)-th smallest sample, p in (0, 1]."""
    if not samples:
        raise ValueError("no samples")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    ordered = sorted(samples)
    rank = math.ceil(p * len(ordered))
    return ordered[rank - 1]


def derive_latencies(rec: RequestRecord) -> tuple[float, float | None]:
    """(TTFT ms, TPOT ms) for a successful record; TPOT is None for single-token outputs."""
    if not rec.ok:
        raise ValueError("failed request has no latency")
    ttft = (rec.first_token_time - rec.send_time) * 1000.0
    if rec.output_tokens < 2:
        return ttft, None
    tpot = (rec.completion_time - rec.first_token_time) / (rec.output_tokens - 1) * 1000.0
    return ttft, tpot


def check_slo(result: BenchmarkResult, slo: SloSpec) -> bool:
    """Inclusive thresholds; quality checked only when the result carries a score."""
    if result.ttft_p90 > slo.ttft_p90_max:
        return False
    if result.tpot_p90 > slo.tpot_p90_max:
        return False
    if result.error_rate > slo.max_error_rate:
        return False
    if slo.quality_min is not None and result.quality is not None:
        if result.quality < slo.quality_min:
            return False
    return True
