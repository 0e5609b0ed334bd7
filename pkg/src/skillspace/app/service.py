"""HTTP/WebSocket service around the teleop loop: `/ws` speaks the
four-message transport, `/api/*` exposes the manifest and run reports,
and the console's static bundle is mounted at the root when present."""

from __future__ import annotations

import asyncio
import csv
import json
import queue
from contextlib import asynccontextmanager
from pathlib import Path

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import HTMLResponse, JSONResponse
from fastapi.staticfiles import StaticFiles

from .teleop import TeleopLoop
from .transport import ErrorMsg, hello_message, parse_command

PLACEHOLDER = """<!doctype html><title>teleop</title>
<p>Console assets are not built. The transport is live on <code>/ws</code>;
see <code>/api/manifest</code> for the command schema.</p>"""


def run_report(root):
    """Digest of every run under `root`: last metrics row per run plus any
    saved evaluation reports."""
    root = Path(root)
    runs = []
    if root.exists():
        for metrics in sorted(root.glob("**/metrics.csv")):
            with open(metrics) as f:
                rows = list(csv.DictReader(f))
            if not rows:
                continue
            last = rows[-1]
            name = str(metrics.parent.relative_to(root))
            runs.append({"run": name, "rows": len(rows),
                         **{k: last[k] for k in ("update", "steps", "reward")
                            if k in last},
                         **{k: last[k] for k in ("eval_sr", "eval_de", "falls")
                            if last.get(k)}})
    evals = []
    for path in sorted(root.glob("eval/*.json")) if root.exists() else []:
        with open(path) as f:
            evals.append({"file": path.name, **json.load(f)})
    return {"root": str(root), "runs": runs, "evals": evals}


def create_app(loop: TeleopLoop, static_dir=None, report_root=None):
    @asynccontextmanager
    async def lifespan(app):
        if not loop.thread.is_alive():
            loop.start()
        yield
        loop.stop()

    app = FastAPI(title="skillspace teleop", lifespan=lifespan)
    app.state.loop = loop

    @app.get("/api/manifest")
    def manifest():
        return JSONResponse(loop.manifest)

    @app.get("/api/report")
    def report():
        return JSONResponse(run_report(report_root or "runs"))

    @app.get("/api/health")
    def health():
        return {"ok": True, "tick": loop.tick, "falls": loop.falls,
                "steps": loop.steps}

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        sink = queue.Queue(maxsize=8)
        if not loop.attach_sink(sink):
            await ws.send_text(ErrorMsg(
                message="another console session is active").model_dump_json())
            await ws.close()
            return
        try:
            await ws.send_text(hello_message(loop.model).model_dump_json())
            pump = asyncio.create_task(_pump_frames(ws, sink))
            try:
                while True:
                    text = await ws.receive_text()
                    try:
                        loop.submit(parse_command(text))
                    except ValueError as err:
                        await ws.send_text(
                            ErrorMsg(message=str(err)).model_dump_json())
            except WebSocketDisconnect:
                pass  # the loop holds the last accepted command
            finally:
                pump.cancel()
        finally:
            loop.detach_sink()

    static_dir = Path(static_dir) if static_dir else None
    if static_dir and static_dir.exists():
        app.mount("/", StaticFiles(directory=static_dir, html=True),
                  name="console")
    else:
        @app.get("/")
        def index():
            return HTMLResponse(PLACEHOLDER)

    return app


async def _pump_frames(ws: WebSocket, sink):
    while True:
        try:
            text = sink.get_nowait()
        except queue.Empty:
            await asyncio.sleep(0.005)
            continue
        await ws.send_text(text)
