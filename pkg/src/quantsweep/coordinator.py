"""Profile coordinator: expands a profiling plan into (config x qps) runs,
drives saturation search then the main profiling loop, and persists results
resumably through the append-only store."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import yaml

from .benchmark import DirectEndpoint, EngineDownError, ProbeSpec, SimInstance, run_benchmark
from .engine.params import default_params
from .model import ConfigError, EngineConfig, SloSpec, WorkloadSpec, LengthDist, validate_config
from .refdata import ReferenceData, load_reference
from .saturation import InfeasibleConfigError, SearchOpts, find_saturation, probe_seed
from .store import ResultStore, record_key
from .supervisor import EngineSupervisor, InProcessLaunchSpec, SupervisorPolicy, supervise


@dataclass(frozen=True)
class ProfilingPlan:
    configs: tuple[EngineConfig, ...]
    workloads: tuple[WorkloadSpec, ...]
    slo: SloSpec
    fractions: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    explicit_qps: tuple[float, ...] = ()
    probe: ProbeSpec = ProbeSpec(target_qps=1.0, duration=30.0, warmup=5.0)
    main: ProbeSpec = ProbeSpec(target_qps=1.0, duration=120.0, warmup=10.0)
    output_store: str = "results.jsonl"
    resolution: float = 0.25
    qps_cap: float = 512.0
    workers: int = 1
    saturate_explicit: bool = False  # explicit grids skip saturation unless asked
    workload_models: dict = field(default_factory=dict)  # workload id -> model names

    def __post_init__(self) -> None:
        if not self.configs or not self.workloads:
            raise ConfigError("plan requires at least one config and one workload")
        if self.fractions and not self.explicit_qps:
            if list(self.fractions) != sorted(self.fractions):
                raise ConfigError("grid fractions must be sorted ascending")
            if self.fractions[-1] > 1.0 or self.fractions[0] <= 0:
                raise ConfigError("grid fractions must lie in (0, 1]")


@dataclass
class RejectionReport:
    rejected: list[tuple[str, str]] = field(default_factory=list)  # (config key, reason)

    @property
    def ok(self) -> bool:
        return not self.rejected


def load_plan(path: str, ref: ReferenceData | None = None) -> ProfilingPlan:
    """Read a plan file (YAML tree, same format family as the reference data)."""
    ref = ref or load_reference()
    with open(path) as fh:
        raw = yaml.safe_load(fh)

    configs: list[EngineConfig] = []
    spec = raw["configs"]

    def expand_group(group: dict) -> None:
        for model in group["models"]:
            for method in group["methods"]:
                for gpu in group["gpus"]:
                    for tp in group.get("tp", [1]):
                        configs.append(ref.config(model, method, gpu, tp))

    if isinstance(spec, dict):  # cross-product shorthand
        expand_group(spec)
    else:
        for row in spec:
            if "models" in row:  # list of cross-product groups
                expand_group(row)
            else:
                configs.append(ref.config(row["model"], row["method"], row["gpu"], row.get("tp", 1)))

    workloads: list[WorkloadSpec] = []
    workload_models: dict = {}
    for row in raw["workloads"]:
        if "dataset" in row:
            ds = ref.dataset(row["dataset"])
            wl = ds.workload(qps=1.0, duration=60.0, seed=int(row.get("seed", 0)))
            wl = WorkloadSpec(
                id=row.get("id", ds.name), input_len=wl.input_len, output_len=wl.output_len,
                qps=1.0, duration=60.0, seed=wl.seed,
            )
        else:
            def dist(d) -> LengthDist:
                if isinstance(d, dict):
                    return LengthDist(float(d["mean"]), float(d.get("dispersion", 0.0)))
                return LengthDist(float(d))
            wl = WorkloadSpec(
                id=row["id"],
                input_len=dist(row["input"]),
                output_len=dist(row["output"]),
                qps=1.0,
                duration=60.0,
                seed=int(row.get("seed", 0)),
            )
        workloads.append(wl)
        if row.get("models"):
            workload_models[wl.id] = tuple(row["models"])

    slo_row = raw["slo"]
    slo = SloSpec(
        ttft_p90_max=float(slo_row["ttft_p90_ms"]),
        tpot_p90_max=float(slo_row["tpot_p90_ms"]),
        quality_min=slo_row.get("quality_min"),
        max_error_rate=float(slo_row.get("max_error_rate", 0.0)),
    )

    grid = raw.get("grid", {})
    fractions = tuple(grid.get("fractions", (0.25, 0.5, 0.75, 1.0)))
    explicit = tuple(grid.get("explicit", ()))

    def probe_of(key: str, default: ProbeSpec) -> ProbeSpec:
        row = raw.get(key)
        if not row:
            return default
        return ProbeSpec(
            target_qps=1.0,
            duration=float(row.get("duration", default.duration)),
            warmup=float(row.get("warmup", default.warmup)),
            client_timeout=float(row.get("client_timeout", default.client_timeout)),
        )

    return ProfilingPlan(
        configs=tuple(configs),
        workloads=tuple(workloads),
        slo=slo,
        fractions=fractions,
        explicit_qps=explicit,
        probe=probe_of("probe", ProbeSpec(target_qps=1.0, duration=30.0, warmup=5.0)),
        main=probe_of("main", ProbeSpec(target_qps=1.0, duration=120.0, warmup=10.0)),
        output_store=raw.get("store", "results.jsonl"),
        resolution=float(raw.get("resolution", 0.25)),
        qps_cap=float(raw.get("qps_cap", 512.0)),
        workers=int(raw.get("workers", 1)),
        saturate_explicit=bool(raw.get("saturate_explicit", False)),
        workload_models=workload_models,
    )


def expand_plan(plan: ProfilingPlan) -> tuple[list[tuple[EngineConfig, WorkloadSpec]], RejectionReport]:
    """Validate configs and produce the (config, workload) task list in
    deterministic order. Invalid configs land in the rejection report."""
    report = RejectionReport()
    valid: list[EngineConfig] = []
    for config in plan.configs:
        problems = validate_config(config)
        if problems:
            for p in problems:
                report.rejected.append((config.key, p))
        else:
            valid.append(config)
    tasks = [
        (c, w)
        for c in valid
        for w in plan.workloads
        if not plan.workload_models.get(w.id) or c.model.name in plan.workload_models[w.id]
    ]
    return tasks, report


class SupervisedEndpoint:
    """Endpoint view over a supervised engine: always talks to the current
    instance and surfaces EngineDown when it is unhealthy."""

    def __init__(self, sup: EngineSupervisor, config_key: str):
        self.sup = sup
        self.config_key = config_key

    def run_probe(self, workload, probe):
        instance = self.sup.instance
        if instance is None or not instance.health():
            raise EngineDownError(f"engine for {self.config_key} not healthy")
        return DirectEndpoint(instance).run_probe(workload, probe)


@dataclass
class ExecutionHooks:
    """Test seams: called around each stored run."""

    before_task: object = None  # Callable[[str], None], may raise to simulate a crash
    instance_factory: object = None  # Callable[[EngineConfig, int], SimInstance]
    on_supervisor_done: object = None  # Callable[[str, EngineSupervisor], None]


def execute_plan(plan: ProfilingPlan, *, store: ResultStore | None = None,
                 hooks: ExecutionHooks | None = None,
                 policy: SupervisorPolicy | None = None,
                 endpoint_override=None,
                 mains: bool = True) -> tuple[ResultStore, RejectionReport]:
    """Run every planned task, skipping keys already in the store.

    Saturation per (config, workload) runs first because grid fractions
    reference it; each main run appends one record. A config aborted by the
    supervisor is marked in the store with the captured log tail. With an
    endpoint override (URL or endpoint object) the engine lifecycle is
    skipped and every run targets that endpoint directly.
    """
    store = store if store is not None else ResultStore(plan.output_store)
    hooks = hooks or ExecutionHooks()
    tasks, report = expand_plan(plan)
    policy = policy or SupervisorPolicy(probe_interval=0.05, failure_threshold=2,
                                        startup_timeout=5.0, max_restarts=3)

    def run_task(config: EngineConfig, workload: WorkloadSpec) -> None:
        key = config.key

        def factory(generation: int) -> SimInstance:
            if hooks.instance_factory is not None:
                return hooks.instance_factory(config, generation)
            return SimInstance(config, default_params(config))

        if endpoint_override is not None:
            if isinstance(endpoint_override, str):
                from .benchmark import HttpEndpoint
                endpoint = HttpEndpoint(endpoint_override)
            else:
                endpoint = endpoint_override
            sup = None
        else:
            sup = supervise(InProcessLaunchSpec(factory=factory), policy)
            endpoint = SupervisedEndpoint(sup, key)

        def on_engine_down() -> None:
            if sup is None:
                raise EngineDownError(f"override endpoint for {key} is down")
            if not sup.wait_healthy(timeout=30.0):
                raise EngineDownError(f"supervisor gave up on {key}")

        try:
            if sup is not None and not sup.wait_healthy(
                    timeout=policy.startup_timeout * (policy.max_restarts + 1)):
                store.append("aborted", key, workload.id, None,
                             {"reason": "startup failed", "log": sup.log_tail})
                return
            sat_qps = None
            need_saturation = not plan.explicit_qps or plan.saturate_explicit
            sat_key = record_key(key, workload.id, None, "saturation")
            if not need_saturation:
                pass
            elif sat_key in store:
                sat_qps = store.get(sat_key)["data"]["saturation_qps"]
            else:
                if hooks.before_task is not None:
                    hooks.before_task(sat_key)
                try:
                    sat = find_saturation(
                        endpoint, workload, plan.slo,
                        SearchOpts(resolution=plan.resolution, qps_cap=plan.qps_cap,
                                   probe=plan.probe),
                        config_key=key, on_engine_down=on_engine_down,
                        on_probe=lambda r: store.append(
                            "probe", key, workload.id, r.target_qps, r.to_dict()
                        ),
                    )
                except InfeasibleConfigError as exc:
                    store.append("infeasible", key, workload.id, None,
                                 {"result": exc.result.to_dict()})
                    return
                store.append("saturation", key, workload.id, None, sat.to_dict())
                sat_qps = sat.saturation_qps

            if plan.explicit_qps:
                grid = list(plan.explicit_qps)
            else:
                grid = [round(f * sat_qps, 4) for f in plan.fractions]
            if not mains:
                return
            for qps in grid:
                if qps <= 0:
                    continue
                main_key = record_key(key, workload.id, qps, "main")
                if main_key in store:
                    continue
                if hooks.before_task is not None:
                    hooks.before_task(main_key)
                spec = replace(plan.main, target_qps=qps,
                               seed=probe_seed(key, workload.id) ^ 0x5EED)
                while True:
                    try:
                        result = run_benchmark(endpoint, workload, spec, plan.slo, config_key=key)
                        break
                    except EngineDownError:
                        on_engine_down()
                store.append("main", key, workload.id, qps, result.to_dict())
        except EngineDownError:
            store.append("aborted", key, workload.id, None,
                         {"reason": "engine down after max restarts",
                          "log": sup.log_tail if sup is not None else ""})
        finally:
            if sup is not None:
                sup.stop()
                if hooks.on_supervisor_done is not None:
                    hooks.on_supervisor_done(key, sup)

    if plan.workers <= 1:
        for config, workload in tasks:
            run_task(config, workload)
    else:
        with ThreadPoolExecutor(max_workers=plan.workers) as pool:
            futures = [pool.submit(run_task, c, w) for c, w in tasks]
            for f in futures:
                f.result()
    return store, report
