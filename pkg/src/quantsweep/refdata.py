"""Loader for the shipped reference tables (methods, GPUs, models, datasets)."""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass

import yaml

from .model import (
    ConfigError,
    EngineConfig,
    GpuSpec,
    LengthDist,
    ModelSpec,
    QuantMethod,
    WorkloadSpec,
)


@dataclass(frozen=True)
class DatasetDescriptor:
    name: str
    input_mean: float
    output_mean: float
    dispersion: float
    midrange_qps: float

    def workload(self, qps: float, duration: float, warmup: float = 0.0,
                 seed: int = 0, arrival: str = "poisson") -> WorkloadSpec:
        return WorkloadSpec(
            id=self.name,
            input_len=LengthDist(self.input_mean, self.dispersion),
            output_len=LengthDist(self.output_mean, self.dispersion),
            qps=qps,
            duration=duration,
            warmup=warmup,
            seed=seed,
            arrival=arrival,
        )


class ReferenceData:
    """Registry built from a reference YAML file."""

    def __init__(self, raw: dict):
        self.methods: dict[str, QuantMethod] = {}
        for name, row in raw["methods"].items():
            self.methods[name] = QuantMethod(
                name=name,
                weight_bits=row["weight_bits"],
                activation_bits=row["activation_bits"],
                kv_bits=row["kv_bits"],
                numeric_family=row["family"],
            )
        self.gpus: dict[str, GpuSpec] = {}
        for name, row in raw["gpus"].items():
            self.gpus[name] = GpuSpec(
                name=name,
                memory_capacity=int(row["memory_bytes"]),
                fp16_tflops=float(row["fp16_tflops"]),
                int8_tops=float(row["int8_tops"]),
                memory_bandwidth=float(row["bandwidth_bytes_per_s"]),
                tdp=float(row["tdp_watts"]),
            )
        self.models: dict[str, ModelSpec] = {}
        for name, row in raw["models"].items():
            self.models[name] = ModelSpec(
                name=name,
                param_count=int(row["param_count"]),
                kv_bytes_per_token_fp16=float(row["kv_bytes_per_token_fp16"]),
            )
        self.datasets: dict[str, DatasetDescriptor] = {}
        for name, row in raw.get("datasets", {}).items():
            self.datasets[name] = DatasetDescriptor(
                name=name,
                input_mean=float(row["input_mean"]),
                output_mean=float(row["output_mean"]),
                dispersion=float(row["dispersion"]),
                midrange_qps=float(row["midrange_qps"]),
            )

    def method(self, name: str) -> QuantMethod:
        if name not in self.methods:
            raise ConfigError(f"unknown method {name!r}; known: {sorted(self.methods)}")
        return self.methods[name]

    def gpu(self, name: str) -> GpuSpec:
        if name not in self.gpus:
            raise ConfigError(f"unknown GPU {name!r}; known: {sorted(self.gpus)}")
        return self.gpus[name]

    def model(self, name: str) -> ModelSpec:
        if name not in self.models:
            raise ConfigError(f"unknown model {name!r}; known: {sorted(self.models)}")
        return self.models[name]

    def dataset(self, name: str) -> DatasetDescriptor:
        if name not in self.datasets:
            raise ConfigError(f"unknown dataset {name!r}; known: {sorted(self.datasets)}")
        return self.datasets[name]

    def config(self, model: str, method: str, gpu: str, tp: int = 1,
               workload_id: str = "") -> EngineConfig:
        return EngineConfig(
            model=self.model(model),
            method=self.method(method),
            gpu=self.gpu(gpu),
            tp_degree=tp,
            workload_id=workload_id,
        )


_cached: ReferenceData | None = None


def load_reference(path: str | None = None) -> ReferenceData:
    """Load reference data from `path`, or the shipped file (cached) when omitted."""
    global _cached
    if path is None:
        if _cached is None:
            text = importlib.resources.files("quantsweep.data").joinpath("reference.yaml").read_text()
            _cached = ReferenceData(yaml.safe_load(text))
        return _cached
    with open(path) as fh:
        return ReferenceData(yaml.safe_load(fh))
