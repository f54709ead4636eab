"""JSON-over-WebSocket mirror of the engine state for the navigation console.

Outbound (per connection): the fixture mesh on connect and whenever it changes,
`state` snapshots at the bridge rate (default 30 Hz), `frames` poses alongside,
and a `stats` record about once a second.  Inbound commands steer the session:
a goal position, the guidance on/off toggle, and the cutting flag.  Message
schemas are documented in docs/ui-bridge.md and exercised by scripted clients.
"""

from __future__ import annotations

import dataclasses
import json
import mimetypes
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from websockets.datastructures import Headers
from websockets.http11 import Request, Response
from websockets.sync.server import Server, ServerConnection, serve

from .engine import ProxyState, VfConfig
from .frames import RigidTransform
from .geometry import FixtureMesh
from .servo import Mailbox, ServoStats

DEFAULT_UI_PORT = 8080
DEFAULT_RATE_HZ = 30.0


@dataclass
class BridgeHub:
    """Shared mailboxes wiring one live session to any number of UI clients."""

    state_box: "Mailbox[ProxyState]"
    mesh_box: "Mailbox[FixtureMesh]"
    cfg_box: "Mailbox[VfConfig]"
    goal_box: "Mailbox[np.ndarray]"
    cut_box: "Mailbox[bool]"
    stats_box: "Mailbox[ServoStats]"
    anchor_pose: Callable[[], RigidTransform] = RigidTransform.identity
    margin_fn: Optional[Callable[[np.ndarray], float]] = None  # true-tumor distance
    run_min_margin: Optional[float] = None
    commands_locked: bool = False  # batch runs reject inbound commands
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def note_margin(self, goal: np.ndarray, cutting: bool) -> None:
        if self.margin_fn is None or not cutting:
            return
        m = float(self.margin_fn(goal))
        with self._lock:
            if self.run_min_margin is None or m < self.run_min_margin:
                self.run_min_margin = m


def encode_state(state: ProxyState, vf_enabled: bool, cutting: bool) -> str:
    return json.dumps(
        {
            "type": "state",
            "t_ns": state.timestamp_ns,
            "proxy": state.proxy.tolist(),
            "goal": state.goal.tolist(),
            "force": state.force.tolist(),
            "in_contact": state.in_contact,
            "stale": state.stale,
            "depth_mm": state.depth_mm,
            "vf_enabled": vf_enabled,
            "cutting": cutting,
        },
        separators=(",", ":"),
    )


def encode_mesh(mesh: FixtureMesh) -> str:
    return json.dumps(
        {
            "type": "mesh",
            "vertices": mesh.vertices.tolist(),
            "triangles": mesh.triangles.tolist(),
        },
        separators=(",", ":"),
    )


def encode_frames(state: ProxyState, anchor: RigidTransform) -> str:
    return json.dumps(
        {
            "type": "frames",
            "tip": state.goal.tolist(),
            "anchor_r": anchor.rotation.reshape(-1).tolist(),
            "anchor_t": anchor.translation.tolist(),
        },
        separators=(",", ":"),
    )


def encode_stats(stats: ServoStats | None, hub: BridgeHub, vf_enabled: bool) -> str:
    d = {
        "type": "stats",
        "vf_enabled": vf_enabled,
        "min_margin_mm": hub.run_min_margin,
    }
    if stats is not None:
        d.update(
            tick_count=stats.tick_count,
            mean_period_ns=stats.mean_period_ns,
            p99_period_ns=stats.p99_period_ns,
            max_period_ns=stats.max_period_ns,
            mean_compute_ns=stats.mean_compute_ns,
            overrun_count=stats.overrun_count,
            stale_tick_count=stats.stale_tick_count,
        )
    return json.dumps(d, separators=(",", ":"))


def handle_command(hub: BridgeHub, text: str) -> Optional[str]:
    """Apply one inbound UI command; returns an error reply or None."""
    try:
        msg = json.loads(text)
        kind = msg["type"]
    except (json.JSONDecodeError, TypeError, KeyError):
        return json.dumps({"type": "error", "message": "malformed command"})
    if hub.commands_locked:
        return json.dumps({"type": "error", "message": "commands rejected: batch run active"})
    try:
        if kind == "goal":
            p = np.asarray(msg["p"], dtype=np.float64).reshape(3)
            if not np.all(np.isfinite(p)):
                raise ValueError("goal must be finite")
            hub.goal_box.put(p, timestamp_ns=time.monotonic_ns())
        elif kind == "vf":
            snap = hub.cfg_box.read()
            cfg = snap.value if snap is not None else VfConfig()
            hub.cfg_box.put(dataclasses.replace(cfg, enabled=bool(msg["enabled"])))
        elif kind == "cut":
            hub.cut_box.put(bool(msg["active"]), timestamp_ns=time.monotonic_ns())
        else:
            return json.dumps({"type": "error", "message": f"unknown command type {kind!r}"})
    except (KeyError, TypeError, ValueError) as exc:
        return json.dumps({"type": "error", "message": f"bad {kind} command: {exc}"})
    return None


_PLACEHOLDER_HTML = """<!doctype html>
<html><head><meta charset="utf-8"><title>hapticfence</title></head>
<body style="font-family: sans-serif; background: #0b0f14; color: #c9d4e0; padding: 2em">
<h1>hapticfence bridge is up</h1>
<p>The WebSocket bridge is live on this port, but no navigation console assets
were found.  Build them first:</p>
<pre>cd frontend &amp;&amp; npm install &amp;&amp; npm run build</pre>
<p>then restart <code>hapticfence serve</code> from the repository root
(or point it at the build with <code>--ui-assets frontend/dist</code>).</p>
</body></html>
"""


def _http_response(status: int, reason: str, content_type: str, body: bytes) -> Response:
    headers = Headers(
        [
            ("Content-Type", content_type),
            ("Content-Length", str(len(body))),
            ("Cache-Control", "no-cache"),
        ]
    )
    return Response(status, reason, headers, body)


class UiBridge:
    """WebSocket fan-out of the latest session snapshot at a fixed rate.

    Plain HTTP GETs on the same port serve the navigation console from
    `static_dir` (falling back to a build-instructions page), so one port
    carries both the page and its live data.
    """

    def __init__(
        self,
        hub: BridgeHub,
        host: str = "127.0.0.1",
        port: int = DEFAULT_UI_PORT,
        rate_hz: float = DEFAULT_RATE_HZ,
        static_dir: Path | str | None = None,
    ):
        self.hub = hub
        self.host = host
        self.rate_hz = rate_hz
        self.static_dir = None if static_dir is None else Path(static_dir)
        self._stop = threading.Event()
        self._server: Server = serve(self._handler, host, port, process_request=self._serve_asset)
        self.port = self._server.socket.getsockname()[1]
        self._thread: threading.Thread | None = None

    def _serve_asset(self, connection: ServerConnection, request: Request) -> Optional[Response]:
        if "websocket" in request.headers.get("Upgrade", "").lower():
            return None  # WebSocket handshake proceeds normally
        path = request.path.split("?", 1)[0]
        if path == "/":
            path = "/index.html"
        if self.static_dir is not None:
            root = self.static_dir.resolve()
            try:
                candidate = (root / path.lstrip("/")).resolve()
                found = candidate.is_relative_to(root) and candidate.is_file()
            except (OSError, ValueError):
                found = False
            if found:
                ctype = mimetypes.guess_type(candidate.name)[0] or "application/octet-stream"
                if ctype.startswith("text/") or ctype in ("application/json", "image/svg+xml"):
                    ctype += "; charset=utf-8"
                return _http_response(200, "OK", ctype, candidate.read_bytes())
        if path == "/index.html":
            return _http_response(200, "OK", "text/html; charset=utf-8", _PLACEHOLDER_HTML.encode())
        return _http_response(404, "Not Found", "text/plain; charset=utf-8", b"not found\n")

    def start(self) -> None:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        self._server.shutdown()
        if self._thread is not None:
            self._thread.join(timeout=2.0)

    def _handler(self, ws: ServerConnection) -> None:
        hub = self.hub
        period = 1.0 / self.rate_hz

        def read_loop() -> None:
            while not self._stop.is_set():
                try:
                    text = ws.recv()
                except Exception:
                    return
                reply = handle_command(hub, text)
                if reply is not None:
                    try:
                        ws.send(reply)
                    except Exception:
                        return

        reader = threading.Thread(target=read_loop, daemon=True)
        reader.start()

        last_mesh_seq = 0
        last_stats = 0.0
        try:
            while not self._stop.is_set():
                t0 = time.monotonic()
                mesh_snap = hub.mesh_box.read()
                if mesh_snap is not None and mesh_snap.seq != last_mesh_seq:
                    ws.send(encode_mesh(mesh_snap.value))
                    last_mesh_seq = mesh_snap.seq

                cfg_snap = hub.cfg_box.read()
                vf_enabled = cfg_snap.value.enabled if cfg_snap is not None else True
                cut_snap = hub.cut_box.read()
                cutting = bool(cut_snap.value) if cut_snap is not None else False

                state_snap = hub.state_box.read()
                if state_snap is not None:
                    state: ProxyState = state_snap.value
                    hub.note_margin(state.goal, cutting)
                    ws.send(encode_state(state, vf_enabled, cutting))
                    ws.send(encode_frames(state, hub.anchor_pose()))

                if t0 - last_stats >= 1.0:
                    stats_snap = hub.stats_box.read()
                    ws.send(encode_stats(None if stats_snap is None else stats_snap.value, hub, vf_enabled))
                    last_stats = t0

                remaining = period - (time.monotonic() - t0)
                if remaining > 0:
                    time.sleep(remaining)
        except Exception:
            pass  # client disconnected
