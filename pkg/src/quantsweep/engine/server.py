"""HTTP facade over the simulated engine.

Wire protocol:
  POST /v1/completions   body {"prompt_tokens": int, "max_tokens": int, "stream": true}
                         -> SSE stream of `token` events (monotonic virtual
                         timestamp each) terminated by a `done` event with
                         token counts
  GET  /health           -> 200 "ok"
  GET  /metrics/energy   -> cumulative joules as decimal text
  POST /admin/fault      body {"kind": "crash"|"hang"|"slow", "factor": f}

The engine advances in virtual time: `time_scale` virtual seconds elapse per
wall second (1.0 = real time). The simulator core runs in a single asyncio
task; handlers only enqueue requests and read token events, so engine state
mutations are serialized.
"""

from __future__ import annotations

import asyncio
import heapq
import json
import os
import threading
from dataclasses import dataclass, field

from aiohttp import web

from ..model import EngineConfig
from .params import PerfModelParams


@dataclass
class _LiveRequest:
    req_id: int
    prompt_tokens: int
    max_tokens: int
    arrival_v: float
    events: asyncio.Queue = field(default_factory=asyncio.Queue)
    first_token_v: float | None = None


class LiveEngine:
    """Continuous-batching engine advanced in scaled wall time."""

    def __init__(self, params: PerfModelParams, time_scale: float = 1.0):
        self.params = params
        self.time_scale = time_scale
        self.loop: asyncio.AbstractEventLoop | None = None
        self._t0: float | None = None
        self._queue: list[_LiveRequest] = []
        self._active: list[tuple[int, _LiveRequest]] = []  # (finish_iter, req)
        self._it_index = 0
        self._reserved = 0.0
        self._work = 0.0
        self._work_marked_v = 0.0
        self._wake = asyncio.Event()
        self._stopped = False
        self._slow_factor = 1.0
        self._hung = False
        self._next_id = 0
        self._start_iters: dict[int, int] = {}

    # -- virtual clock ----------------------------------------------------
    def virtual_now(self) -> float:
        if self._t0 is None:
            return 0.0
        return (self.loop.time() - self._t0) * self.time_scale

    async def _sleep_virtual(self, dv: float) -> None:
        await asyncio.sleep(dv / self.time_scale)

    # -- engine knobs -----------------------------------------------------
    @property
    def step_time(self) -> float:
        return self.params.decode_step_time * self._slow_factor

    def prefill_time(self, tokens: int) -> float:
        return self.params.prefill_time_per_token * tokens * self._slow_factor

    # -- public API (called from handlers) --------------------------------
    def submit(self, prompt_tokens: int, max_tokens: int) -> _LiveRequest:
        self._next_id += 1
        req = _LiveRequest(self._next_id, prompt_tokens, max_tokens, self.virtual_now())
        self._queue.append(req)
        self._wake.set()
        return req

    def energy_joules(self) -> float:
        p = self.params
        idle = p.idle_power_frac * p.total_power * self.virtual_now()
        working = (1.0 - p.idle_power_frac) * p.total_power * self._work / p.max_batch_tokens
        return idle + working

    # -- core loop ---------------------------------------------------------
    async def run(self) -> None:
        self.loop = asyncio.get_running_loop()
        self._t0 = self.loop.time()
        p = self.params
        while not self._stopped:
            if self._hung:
                await asyncio.sleep(0.05)
                continue
            admitted = await self._admit()
            if admitted:
                continue
            if not self._active:
                self._wake.clear()
                if self._queue:  # head does not fit yet
                    await asyncio.sleep(0.01)
                    continue
                try:
                    await asyncio.wait_for(self._wake.wait(), timeout=0.5)
                except asyncio.TimeoutError:
                    pass
                continue
            st = self.step_time
            await self._sleep_virtual(st)
            if self._hung or self._stopped:
                continue
            self._it_index += 1
            now_v = self.virtual_now()
            kv = 0.0
            for _, req in self._active:
                kv += req.prompt_tokens + 1 + (self._it_index - 1 - self._start_iters[req.req_id])
            self._work += kv * st
            for _, req in list(self._active):
                req.events.put_nowait(("token", now_v))
            while self._active and self._active[0][0] <= self._it_index:
                _, req = heapq.heappop(self._active)
                self._reserved -= req.prompt_tokens + req.max_tokens
                del self._start_iters[req.req_id]
                req.events.put_nowait(("done", now_v))

    async def _admit(self) -> bool:
        p = self.params
        admitted = False
        while self._queue:
            req = self._queue[0]
            footprint = req.prompt_tokens + req.max_tokens
            if footprint > p.max_batch_tokens:
                self._queue.pop(0)
                req.events.put_nowait(("rejected", self.virtual_now()))
                continue
            if self._reserved + footprint > p.max_batch_tokens:
                return admitted
            self._queue.pop(0)
            self._reserved += footprint
            dur = self.prefill_time(req.prompt_tokens)
            await self._sleep_virtual(dur)
            self._work += req.prompt_tokens * dur
            now_v = self.virtual_now()
            req.first_token_v = now_v
            req.events.put_nowait(("token", now_v))
            if req.max_tokens <= 1:
                self._reserved -= footprint
                req.events.put_nowait(("done", now_v))
            else:
                heapq.heappush(self._active, (self._it_index + req.max_tokens - 1, req))
                self._start_iters[req.req_id] = self._it_index
            admitted = True
        return admitted


def build_app(engine: LiveEngine, *, on_crash=None) -> web.Application:
    hang_gate = asyncio.Event()

    async def completions(request: web.Request) -> web.StreamResponse:
        if engine._hung:
            await hang_gate.wait()
        body = await request.json()
        prompt_tokens = int(body["prompt_tokens"])
        max_tokens = int(body.get("max_tokens", 16))
        req = engine.submit(prompt_tokens, max_tokens)
        resp = web.StreamResponse(
            status=200,
            headers={"Content-Type": "text/event-stream", "Cache-Control": "no-cache"},
        )
        await resp.prepare(request)
        emitted = 0
        while True:
            kind, t = await req.events.get()
            if kind == "token":
                emitted += 1
                payload = json.dumps({"index": emitted - 1, "t": round(t, 6)})
                await resp.write(f"event: token\ndata: {payload}\n\n".encode())
            elif kind == "done":
                payload = json.dumps(
                    {"prompt_tokens": prompt_tokens, "completion_tokens": emitted, "t": round(t, 6)}
                )
                await resp.write(f"event: done\ndata: {payload}\n\n".encode())
                break
            elif kind == "rejected":
                payload = json.dumps({"error": "request exceeds token budget"})
                await resp.write(f"event: error\ndata: {payload}\n\n".encode())
                break
        await resp.write_eof()
        return resp

    async def health(request: web.Request) -> web.Response:
        if engine._hung:
            await hang_gate.wait()
        return web.Response(text="ok")

    async def energy(request: web.Request) -> web.Response:
        if engine._hung:
            await hang_gate.wait()
        return web.Response(text=f"{engine.energy_joules():.6f}")

    async def fault(request: web.Request) -> web.Response:
        body = await request.json()
        kind = body.get("kind")
        if kind == "crash":
            if on_crash is not None:
                asyncio.get_running_loop().call_later(0.05, on_crash)
            else:
                asyncio.get_running_loop().call_later(0.05, os._exit, 1)
            return web.Response(text="crashing")
        if kind == "hang":
            engine._hung = True
            return web.Response(text="hung")
        if kind == "slow":
            engine._slow_factor = float(body.get("factor", 10.0))
            return web.Response(text=f"slowed x{engine._slow_factor}")
        return web.Response(status=400, text=f"unknown fault kind {kind!r}")

    app = web.Application()
    app.router.add_post("/v1/completions", completions)
    app.router.add_get("/health", health)
    app.router.add_get("/metrics/energy", energy)
    app.router.add_post("/admin/fault", fault)
    return app


class ServerHandle:
    """An in-process server running on its own thread and event loop."""

    def __init__(self, config: EngineConfig, params: PerfModelParams,
                 port: int = 0, time_scale: float = 1.0):
        self.config = config
        self.params = params
        self.time_scale = time_scale
        self.port = port
        self._thread: threading.Thread | None = None
        self._loop: asyncio.AbstractEventLoop | None = None
        self._ready = threading.Event()
        self._engine: LiveEngine | None = None

    def start(self) -> "ServerHandle":
        def worker() -> None:
            loop = asyncio.new_event_loop()
            asyncio.set_event_loop(loop)
            self._loop = loop
            loop.run_until_complete(self._serve())
            loop.close()

        self._thread = threading.Thread(target=worker, daemon=True)
        self._thread.start()
        if not self._ready.wait(timeout=10):
            raise RuntimeError("server failed to start")
        return self

    async def _serve(self) -> None:
        self._engine = LiveEngine(self.params, self.time_scale)
        self._stop_event = asyncio.Event()
        app = build_app(self._engine, on_crash=lambda: self._stop_event.set())
        runner = web.AppRunner(app)
        await runner.setup()
        site = web.TCPSite(runner, "127.0.0.1", self.port)
        await site.start()
        self.port = runner.addresses[0][1]
        engine_task = asyncio.create_task(self._engine.run())
        self._ready.set()
        await self._stop_event.wait()
        self._engine._stopped = True
        engine_task.cancel()
        try:
            await engine_task
        except asyncio.CancelledError:
            pass
        await runner.cleanup()

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def stop(self) -> None:
        if self._loop is not None and not self._loop.is_closed():
            self._loop.call_soon_threadsafe(self._stop_event.set)
        if self._thread is not None:
            self._thread.join(timeout=10)

    def inject_fault(self, kind: str, factor: float = 10.0) -> None:
        """In-process fault injection: crash terminates the listener, hang
        stops all responses, slow multiplies service times."""
        if self._loop is None or self._loop.is_closed():
            raise RuntimeError("unknown instance: server not running")
        if kind == "crash":
            self._loop.call_soon_threadsafe(self._stop_event.set)
            self._thread.join(timeout=10)
        elif kind == "hang":
            def do_hang():
                self._engine._hung = True
            self._loop.call_soon_threadsafe(do_hang)
        elif kind == "slow":
            def do_slow():
                self._engine._slow_factor = factor
            self._loop.call_soon_threadsafe(do_slow)
        else:
            raise ValueError(f"unknown fault kind {kind!r}")


def serve_protocol(config: EngineConfig, params: PerfModelParams, port: int,
                   time_scale: float = 1.0) -> ServerHandle:
    """Start the wire-protocol facade; raises on bind failure."""
    handle = ServerHandle(config, params, port=port, time_scale=time_scale)
    return handle.start()
