"""Engine instance supervision: launch, health-check, restart, pause/resume.

One supervisor thread per instance. The coordinator reads the linearizable
status cell (`state`) and blocks on `wait_healthy()` before re-running a
suspended probe, so it never benchmarks a dead endpoint.
"""

from __future__ import annotations

import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field

import requests

STATES = ("Stopped", "Starting", "Healthy", "Unresponsive", "Restarting", "Failed")


@dataclass(frozen=True)
class SupervisorPolicy:
    probe_interval: float = 5.0
    failure_threshold: int = 3
    startup_timeout: float = 30.0
    max_restarts: int = 3
    probe_timeout: float = 2.0


@dataclass
class InProcessLaunchSpec:
    """Launch an in-process SimInstance via a factory; no subprocess machinery."""

    factory: object  # Callable[[int generation], SimInstance]


@dataclass
class SubprocessLaunchSpec:
    """Launch a serving process; health = HTTP GET /health with 2 s timeout."""

    command: list[str]
    port: int
    env: dict = field(default_factory=dict)

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}"


class EngineSupervisor:
    def __init__(self, launch_spec, policy: SupervisorPolicy | None = None):
        self.launch_spec = launch_spec
        self.policy = policy or SupervisorPolicy()
        self.state = "Stopped"
        self.consecutive_failures = 0
        self.restarts_used = 0
        self.generation = 0
        self.events: list[tuple[float, str]] = []
        self.log_tail = ""
        self.instance = None  # in-process mode
        self.process: subprocess.Popen | None = None
        self._lock = threading.Lock()
        self._healthy_evt = threading.Event()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    # -- lifecycle ----------------------------------------------------------
    def start(self) -> "EngineSupervisor":
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=10)
        self._terminate_instance()
        with self._lock:
            if self.state != "Failed":
                self._set_state("Stopped")

    def wait_healthy(self, timeout: float | None = None) -> bool:
        return self._healthy_evt.wait(timeout)

    # -- internals ------------------------------------------------------------
    def _emit(self, event: str) -> None:
        self.events.append((time.monotonic(), event))

    def _set_state(self, state: str) -> None:
        self.state = state
        self._emit(f"state:{state}")
        if state == "Healthy":
            self._healthy_evt.set()
        else:
            self._healthy_evt.clear()

    def _probe(self) -> bool:
        if isinstance(self.launch_spec, InProcessLaunchSpec):
            return self.instance is not None and self.instance.health()
        try:
            resp = requests.get(
                f"{self.launch_spec.url}/health", timeout=self.policy.probe_timeout
            )
            return resp.status_code == 200
        except requests.RequestException:
            return False

    def _launch(self) -> bool:
        with self._lock:
            self._set_state("Starting")
        try:
            if isinstance(self.launch_spec, InProcessLaunchSpec):
                self.instance = self.launch_spec.factory(self.generation)
            else:
                self.process = subprocess.Popen(
                    self.launch_spec.command,
                    env=None if not self.launch_spec.env else self.launch_spec.env,
                    stdout=subprocess.PIPE,
                    stderr=subprocess.STDOUT,
                )
        except Exception as exc:  # launch failure counts as a restart attempt
            self.log_tail = f"launch failed: {exc}"
            return False
        self.generation += 1
        self._emit("launched")
        deadline = time.monotonic() + self.policy.startup_timeout
        while time.monotonic() < deadline and not self._stop.is_set():
            if self._probe():
                with self._lock:
                    self.consecutive_failures = 0
                    self._set_state("Healthy")
                self._emit("probe_ok")
                return True
            time.sleep(min(0.05, self.policy.probe_interval))
        return False

    def _terminate_instance(self) -> None:
        self._emit("terminate")
        if isinstance(self.launch_spec, InProcessLaunchSpec):
            if self.instance is not None:
                self.instance.crashed = True
        elif self.process is not None:
            self.process.kill()
            self.process.wait(timeout=10)
            self._capture_log()
            self.process = None

    def _capture_log(self, limit: int = 8192) -> None:
        # only safe once the process has exited; read() blocks on a live pipe
        if self.process is not None and self.process.stdout is not None:
            try:
                data = self.process.stdout.read() or b""
                self.log_tail = data[-limit:].decode(errors="replace")
            except Exception:
                pass

    def _run(self) -> None:
        if not self._launch():
            self._handle_restart_or_fail()
        while not self._stop.is_set():
            if self.state == "Failed":
                return
            time.sleep(self.policy.probe_interval)
            if self._stop.is_set():
                return
            if self._probe():
                with self._lock:
                    self.consecutive_failures = 0
                    if self.state != "Healthy":
                        self._set_state("Healthy")
                continue
            with self._lock:
                self.consecutive_failures += 1
                if self.consecutive_failures < self.policy.failure_threshold:
                    continue
                self._set_state("Unresponsive")
            self._emit("pause")
            self._terminate_instance()
            self._handle_restart_or_fail()

    def _handle_restart_or_fail(self) -> None:
        while not self._stop.is_set():
            if self.restarts_used >= self.policy.max_restarts:
                with self._lock:
                    self._set_state("Failed")
                self._emit("failed")
                return
            with self._lock:
                self._set_state("Restarting")
            self.restarts_used += 1
            self._emit("relaunch")
            if self._launch():
                self._emit("resume")
                return
            self._terminate_instance()


def supervise(launch_spec, policy: SupervisorPolicy | None = None) -> EngineSupervisor:
    """Start supervising an engine instance; returns the running handle."""
    return EngineSupervisor(launch_spec, policy).start()
