"""FastAPI service wrapping the training core.

Endpoints:
  GET  /health                liveness + protocol version
  POST /runs                  start a training run in a background thread
  GET  /runs/{run_id}         run state + latest progress
  POST /runs/{run_id}/stop    cooperative stop
  POST /eval                  evaluate a checkpoint
  POST /analyze               influence report from a buffer export
  WS   /ws                    telemetry stream + operator commands
  /ui                         static operator dashboard (when built)

The websocket speaks the wire protocol: server sends hello/snapshot/metrics/
influence; clients send takeover/action/pause/resume. In fixture mode the
socket replays a recorded session instead of live telemetry.
"""

from __future__ import annotations

import asyncio
import logging
import threading
import uuid
from pathlib import Path

from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from fastapi.responses import RedirectResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from . import analyze as analyze_mod
from .config import TrainConfig, build_config, config_defaults
from .rng import substream
from .sim import make_task
from .trainer import Trainer, evaluate, load_agents
from .wire import PROTOCOL_VERSION, INBOUND_TYPES, TelemetryBus, make_message, read_recording

log = logging.getLogger("esrl.service")


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str
    protocol_version: int = PROTOCOL_VERSION


class TrainRequest(BaseModel):
    config: dict = Field(default_factory=dict)
    out_dir: str | None = None


class RunStatus(BaseModel):
    run_id: str
    state: str  # running | finished | failed | stopped
    step: int
    total_steps: int
    mode: str
    task: str
    summary: dict | None = None
    error: str | None = None


class EvalRequest(BaseModel):
    checkpoint: str
    episodes: int = 20
    seed: int = 0


class EvalResponse(BaseModel):
    success_rate: float
    episodes: int
    task: str


class AnalyzeRequest(BaseModel):
    buffer: str
    checkpoint: str
    low_pct: float = 5.0
    high_pct: float = 90.0


class RunManager:
    """At most one live training run; owns its bus and worker thread."""

    def __init__(self):
        self.run_id: str | None = None
        self.trainer: Trainer | None = None
        self.bus: TelemetryBus | None = None
        self.thread: threading.Thread | None = None
        self.stop_flag = threading.Event()
        self.state = "idle"
        self.summary: dict | None = None
        self.error: str | None = None
        self.cfg: TrainConfig | None = None

    def start(self, cfg: TrainConfig, out_dir: str) -> str:
        if self.thread is not None and self.thread.is_alive():
            raise RuntimeError("a run is already active")
        self.run_id = uuid.uuid4().hex[:12]
        self.cfg = cfg
        self.bus = TelemetryBus()
        self.stop_flag = threading.Event()
        self.trainer = Trainer(cfg, out_dir, bus=self.bus, stop_flag=self.stop_flag)
        self.state = "running"
        self.summary = None
        self.error = None

        def work():
            try:
                self.summary = self.trainer.run()
                self.state = "stopped" if self.stop_flag.is_set() else "finished"
            except Exception as err:  # surfaced via /runs/{id}
                self.error = str(err)
                self.state = "failed"

        self.thread = threading.Thread(target=work, name=f"train-{self.run_id}", daemon=True)
        self.thread.start()
        return self.run_id

    def status(self) -> RunStatus:
        if self.run_id is None or self.cfg is None:
            raise KeyError("no run")
        return RunStatus(
            run_id=self.run_id,
            state=self.state,
            step=self.trainer.interaction_steps if self.trainer else 0,
            total_steps=self.cfg.total_steps,
            mode=self.cfg.mode,
            task=self.cfg.task,
            summary=self.summary,
            error=self.error,
        )


def create_app(
    bus: TelemetryBus | None = None,
    fixture_path: str | Path | None = None,
    ui_dir: str | Path | None = None,
    max_speed: bool = False,
    default_out_dir: str = "runs",
) -> FastAPI:
    from contextlib import asynccontextmanager

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        pump = None
        if fixture_path is None:
            pump = asyncio.create_task(_pump_events())
        yield
        if pump is not None:
            pump.cancel()

    app = FastAPI(title="esrl", version="0.1.0", lifespan=lifespan)
    app.state.bus = bus
    app.state.fixture_path = Path(fixture_path) if fixture_path else None
    app.state.max_speed = max_speed
    app.state.runs = RunManager()
    app.state.command_counts = {t: 0 for t in INBOUND_TYPES}
    app.state.malformed_count = 0
    app.state.clients: dict[int, asyncio.Queue] = {}
    app.state.next_client = 0

    from . import __version__

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(version=__version__)

    @app.get("/config/defaults")
    def defaults():
        return config_defaults()

    @app.post("/runs", response_model=RunStatus)
    def start_run(req: TrainRequest):
        try:
            cfg = build_config(overrides=req.config)
        except (ValueError, TypeError) as err:
            raise HTTPException(status_code=422, detail=str(err))
        try:
            run_id = app.state.runs.start(cfg, req.out_dir or f"{default_out_dir}/{cfg.task}-{cfg.mode}-s{cfg.seed}")
        except RuntimeError as err:
            raise HTTPException(status_code=409, detail=str(err))
        app.state.bus = app.state.runs.bus  # telemetry hub follows the live run
        log.info("started run %s", run_id)
        return app.state.runs.status()

    @app.get("/runs/{run_id}", response_model=RunStatus)
    def run_status(run_id: str):
        runs: RunManager = app.state.runs
        if runs.run_id != run_id:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
        return runs.status()

    @app.post("/runs/{run_id}/stop", response_model=RunStatus)
    def stop_run(run_id: str):
        runs: RunManager = app.state.runs
        if runs.run_id != run_id:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
        runs.stop_flag.set()
        return runs.status()

    @app.post("/eval", response_model=EvalResponse)
    def eval_checkpoint(req: EvalRequest):
        try:
            policy, _, _, meta = load_agents(req.checkpoint)
        except FileNotFoundError as err:
            raise HTTPException(status_code=404, detail=str(err))
        task = make_task(meta["task"])
        rate = evaluate(policy, task, req.episodes, substream(req.seed, "eval", 0))
        return EvalResponse(success_rate=rate, episodes=req.episodes, task=task.name)

    @app.post("/analyze")
    def analyze_buffer(req: AnalyzeRequest):
        try:
            return analyze_mod.analyze(req.buffer, req.checkpoint, req.low_pct, req.high_pct)
        except FileNotFoundError as err:
            raise HTTPException(status_code=404, detail=str(err))
        except ValueError as err:
            raise HTTPException(status_code=422, detail=str(err))

    async def _pump_events():
        """Single reader of the bus; fans out to per-client queues."""
        while True:
            bus: TelemetryBus | None = app.state.bus
            if bus is not None:
                for msg in bus.drain_events():
                    for q in list(app.state.clients.values()):
                        if q.full():
                            try:
                                q.get_nowait()  # drop oldest for a slow client
                            except asyncio.QueueEmpty:
                                pass
                        q.put_nowait(msg)
            await asyncio.sleep(0.02)

    def _handle_inbound(raw: dict) -> bool:
        """Route one inbound message; False means the connection must close."""
        if not isinstance(raw, dict) or "type" not in raw:
            app.state.malformed_count += 1
            return True
        if raw.get("version", PROTOCOL_VERSION) != PROTOCOL_VERSION:
            log.warning("refusing client with protocol version %r", raw.get("version"))
            return False
        mtype = raw["type"]
        if mtype not in INBOUND_TYPES:
            log.warning("ignoring unknown inbound message type %r", mtype)
            return True
        app.state.command_counts[mtype] += 1
        log.info("inbound %s: %s", mtype, {k: v for k, v in raw.items() if k != "type"})
        bus: TelemetryBus | None = app.state.bus
        if bus is not None:
            bus.commands.put(raw)
        return True

    async def _serve_live(ws: WebSocket):
        bus: TelemetryBus | None = app.state.bus
        hello = make_message("hello", 0, bus.hello_payload if bus else {})
        await ws.send_json(hello)
        q: asyncio.Queue = asyncio.Queue(maxsize=512)
        cid = app.state.next_client
        app.state.next_client += 1
        app.state.clients[cid] = q

        async def reader():
            while True:
                raw = await ws.receive_json()
                if not _handle_inbound(raw):
                    await ws.close(code=4001)
                    return

        async def writer():
            while True:
                msg = await q.get()
                await ws.send_json(msg)

        try:
            reader_task = asyncio.create_task(reader())
            writer_task = asyncio.create_task(writer())
            done, pending = await asyncio.wait({reader_task, writer_task}, return_when=asyncio.FIRST_COMPLETED)
            for t in pending:
                t.cancel()
        finally:
            app.state.clients.pop(cid, None)

    async def _serve_fixture(ws: WebSocket):
        messages = read_recording(app.state.fixture_path)
        if not messages or messages[0].get("type") != "hello":
            await ws.send_json(make_message("hello", 0, {}))
        prev_ts = None

        async def reader():
            while True:
                raw = await ws.receive_json()
                if not _handle_inbound(raw):
                    await ws.close(code=4001)
                    return

        reader_task = asyncio.create_task(reader())
        try:
            for msg in messages:
                ts = msg.get("ts")
                if not app.state.max_speed and prev_ts is not None and ts is not None:
                    await asyncio.sleep(min(max(ts - prev_ts, 0.0), 1.0))
                prev_ts = ts
                await ws.send_json(msg)
            await asyncio.sleep(0.05)  # let late inbound commands drain
            await ws.close()
        finally:
            reader_task.cancel()

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        try:
            if app.state.fixture_path is not None:
                await _serve_fixture(ws)
            else:
                await _serve_live(ws)
        except WebSocketDisconnect:
            pass
        except RuntimeError:
            pass  # client went away mid-send

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

        @app.get("/")
        def index():
            return RedirectResponse("/ui/")

    return app


def run_server(app: FastAPI, host: str = "127.0.0.1", port: int = 8732) -> None:
    import uvicorn

    uvicorn.run(app, host=host, port=port, log_level="warning")


class BackgroundServer:
    """uvicorn in a daemon thread; used by `train --serve-port`."""

    def __init__(self, app: FastAPI, host: str = "127.0.0.1", port: int = 8732):
        import uvicorn

        self._server = uvicorn.Server(uvicorn.Config(app, host=host, port=port, log_level="warning"))
        self._thread = threading.Thread(target=self._server.run, daemon=True)

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=5)
