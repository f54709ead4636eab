"""Operator entry points: generate scenarios, run headless batches, serve live.

Three subcommands.  `scenario` writes one generated scenario to disk as JSON
plus binary meshes; `run` executes guided/unguided resections headless on a
virtual clock and emits per-seed reports with an aggregate CSV; `serve` hosts
a live session (tracker sim, 1 kHz servo, transform streams on TCP, UI bridge
on WebSocket) until interrupted.

Exit codes: 0 ok, 2 config error (bad flags, invalid config, missing files),
3 runtime error (port conflicts, simulation failures).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import signal
import sys
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .bridge import DEFAULT_RATE_HZ, DEFAULT_UI_PORT, BridgeHub, UiBridge
from .engine import ProxyState, VfConfig
from .errors import ConfigError, HapticFenceError, TumorOutOfBounds
from .frames import FrameGraph, FrameId, RigidTransform
from .geometry import FixtureMesh, inflate, mesh_to_bytes
from .scenario import (
    ResectionReport,
    Scenario,
    ScenarioConfig,
    generate_scenario,
    run_resection,
)
from .servo import Mailbox, ServoStats, WallClock, run_servo
from .tracker import FrameMotion, TrackerSample, TrackerSimulator
from .wire import DEFAULT_PORT, WireMessage, WireServer

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

SCENARIO_FILES = (
    "config.json",
    "phantom.json",
    "tumor.json",
    "contours.json",
    "tumor_mesh.bin",
    "planned_hull.bin",
)


def load_config(path: Optional[str], seed: Optional[int] = None) -> ScenarioConfig:
    """Config from a JSON file (defaults when omitted), with optional seed override."""
    if path is None:
        cfg = ScenarioConfig()
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg = ScenarioConfig.from_json(p.read_text())
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


# -- scenario ------------------------------------------------------------------


def write_scenario_dir(scenario: Scenario, out: Path) -> list[Path]:
    """Persist one generated scenario; returns the files written."""
    out.mkdir(parents=True, exist_ok=True)
    tumor = scenario.tumor
    dumps = lambda d: json.dumps(d, indent=2, sort_keys=True) + "\n"

    texts = {
        "config.json": scenario.cfg.to_json() + "\n",
        "phantom.json": dumps(
            {"dims_mm": scenario.phantom.dims.tolist(), "volume_mm3": scenario.phantom.volume()}
        ),
        "tumor.json": dumps(
            {
                "semi_axes_mm": tumor.semi_axes.tolist(),
                "rotation": tumor.pose.rotation.reshape(-1).tolist(),
                "center_mm": tumor.pose.translation.tolist(),
                "volume_mm3": tumor.volume(),
            }
        ),
        "contours.json": dumps(
            {
                "tumor_frame": str(scenario.stack.tumor_frame),
                "contours": [
                    {
                        "timestamp_ns": c.timestamp_ns,
                        "points_mm": c.points.tolist(),
                        "image_rotation": c.image_pose.rotation.reshape(-1).tolist(),
                        "image_translation": c.image_pose.translation.tolist(),
                    }
                    for c in scenario.stack.contours
                ],
            }
        ),
    }
    blobs = {
        "tumor_mesh.bin": mesh_to_bytes(scenario.true_mesh),
        "planned_hull.bin": mesh_to_bytes(scenario.planned_hull),
    }

    written = []
    for name, text in texts.items():
        (out / name).write_text(text)
        written.append(out / name)
    for name, blob in blobs.items():
        (out / name).write_bytes(blob)
        written.append(out / name)
    return written


def load_scenario_dir(path: Path) -> Scenario:
    """Rebuild the scenario from a directory written by `write_scenario_dir`.

    Only config.json is authoritative; generation is deterministic, so the
    other artifacts are reproduced bit for bit (tests hold it to that).
    """
    cfg_path = Path(path) / "config.json"
    if not cfg_path.is_file():
        raise ConfigError(f"scenario directory has no config.json: {path}")
    return generate_scenario(ScenarioConfig.from_json(cfg_path.read_text()))


def cmd_scenario(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.seed)
    scenario = generate_scenario(cfg)
    written = write_scenario_dir(scenario, Path(args.out))
    for p in written:
        print(p)
    print(
        f"scenario seed={cfg.seed}: tumor {np.round(scenario.tumor.semi_axes, 2).tolist()} mm "
        f"at {np.round(scenario.tumor.pose.translation, 2).tolist()}, "
        f"{len(scenario.stack)} contours, hull {len(scenario.planned_hull.triangles)} faces"
    )
    return EXIT_OK


# -- run -----------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.seed)
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    arms = [("guided", True), ("unguided", False)]
    if args.guided:
        arms = arms[:1]
    elif args.unguided:
        arms = arms[1:]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for offset in range(args.seeds):
        seed = cfg.seed + offset
        scenario = generate_scenario(dataclasses.replace(cfg, seed=seed))
        for arm, guided in arms:
            trajectory, report = run_resection(scenario, guided=guided)
            (out / f"report_s{seed}_{arm}.json").write_text(report.to_json() + "\n")
            trajectory.save_csv(out / f"trajectory_s{seed}_{arm}.csv")
            rows.append(f"{seed},{arm},{report.as_csv_row()}")
            mm = "n/a" if report.min_margin_mm is None else f"{report.min_margin_mm:.2f} mm"
            print(
                f"seed {seed} {arm}: min margin {mm}, "
                f"positive={report.positive_margin}, transected={report.transected}"
            )
    header = "seed,arm," + ResectionReport.csv_header()
    (out / "aggregate.csv").write_text(header + "\n" + "\n".join(rows) + "\n")
    print(out / "aggregate.csv")
    return EXIT_OK


# -- serve ---------------------------------------------------------------------


@dataclass
class ServeSession:
    """A live session bundle; start() binds ports, shutdown() returns servo stats."""

    scenario: Scenario
    hub: BridgeHub
    bridge: UiBridge
    wire: WireServer
    stop: threading.Event
    _servo_thread: threading.Thread
    _stats_out: list

    @property
    def wire_port(self) -> int:
        return self.wire.port

    @property
    def ui_port(self) -> int:
        return self.bridge.port

    def start(self) -> None:
        self.wire.start()
        self.bridge.start()
        self._servo_thread.start()

    def shutdown(self) -> Optional[ServoStats]:
        self.stop.set()
        self._servo_thread.join(timeout=5.0)
        self.wire.stop()
        self.bridge.stop()
        return self._stats_out[0] if self._stats_out else None


def build_serve_session(
    cfg: ScenarioConfig,
    host: str = "127.0.0.1",
    port: int = DEFAULT_PORT,
    ui_port: int = DEFAULT_UI_PORT,
    servo_rate_hz: float = 1000.0,
    tracker_rate_hz: float = 60.0,
    bridge_rate_hz: float = DEFAULT_RATE_HZ,
    static_dir: Optional[Path] = None,
) -> ServeSession:
    """Wire up tracker sim, servo, transform streams, and the UI bridge.

    Goals arrive from UI clients in the displayed tumor frame; the measured
    chain closes exactly around them (position servo), so sensor noise moves
    where the tool truly is, not what the operator sees.  Pass port 0 to bind
    ephemeral ports (tests).  The returned session is not yet started.
    """
    scenario = generate_scenario(cfg)
    displayed = inflate(scenario.planned_hull, cfg.vf.margin)

    state_box: Mailbox[ProxyState] = Mailbox()
    mesh_box: Mailbox[FixtureMesh] = Mailbox()
    cfg_box: Mailbox[VfConfig] = Mailbox()
    goal_box: Mailbox[np.ndarray] = Mailbox()
    cut_box: Mailbox[bool] = Mailbox()
    stats_box: Mailbox[ServoStats] = Mailbox()
    mesh_box.put(displayed)
    cfg_box.put(cfg.vf)

    # park the tool above the fixture until a client steers it
    start_goal = np.array([0.0, 0.0, float(displayed.vertices[:, 2].max()) + 10.0])
    goal_box.put(start_goal)

    sim = TrackerSimulator(
        {FrameId.NEEDLE_SENSOR: FrameMotion(scenario.anchor_pose, cfg.motion)},
        noise=cfg.noise,
        rate_hz=tracker_rate_hz,
    )
    graph = FrameGraph()
    graph.set_edge(FrameId.REFERENCE, FrameId.TRACKER, RigidTransform.identity())
    needle_box: Mailbox[TrackerSample] = Mailbox()
    tip_box: Mailbox[TrackerSample] = Mailbox()

    wire = WireServer(host=host, port=port)
    tumor_stream: Mailbox[WireMessage] = Mailbox()
    tip_stream: Mailbox[WireMessage] = Mailbox()
    mesh_stream: Mailbox[WireMessage] = Mailbox()
    force_stream: Mailbox[WireMessage] = Mailbox()
    wire.add_stream("Tumor", tumor_stream, rate_hz=tracker_rate_hz)
    wire.add_stream("CauteryTip", tip_stream, rate_hz=tracker_rate_hz)
    wire.add_stream("Fixture", mesh_stream, rate_hz=1.0)
    wire.add_stream("Force", force_stream, rate_hz=tracker_rate_hz)
    mesh_stream.put(WireMessage.mesh("Fixture", 0, displayed.vertices, displayed.triangles))

    stop = threading.Event()
    eye = np.eye(3)
    live = {"idx": 0, "next_ns": 0, "meas": scenario.anchor_pose, "t0": None}

    def pre_tick(now_ns: int) -> None:
        if live["t0"] is None:
            live["t0"] = now_ns
        rel = now_ns - live["t0"]
        while rel >= live["next_ns"]:
            s = sim.sample(FrameId.NEEDLE_SENSOR, live["idx"])
            t_ns = live["t0"] + s.timestamp_ns
            needle_box.put(TrackerSample(s.frame, s.pose, t_ns, s.valid), t_ns)
            if s.valid:
                live["meas"] = s.pose
                tumor_stream.put(WireMessage.transform("Tumor", t_ns, s.pose), t_ns)
            live["idx"] += 1
            live["next_ns"] = int(round(live["idx"] * 1e9 / tracker_rate_hz))
        snap = goal_box.read()
        goal = start_goal if snap is None else snap.value
        meas_tip = live["meas"].apply(goal)
        tip_pose = RigidTransform(eye, meas_tip)
        tip_box.put(TrackerSample(FrameId.CAUTERY_TIP, tip_pose, now_ns), now_ns)
        tip_stream.put(WireMessage.transform("CauteryTip", now_ns, tip_pose), now_ns)

    def on_state(state: ProxyState) -> None:
        force_stream.put(WireMessage.force("Force", state.timestamp_ns, state.force), state.timestamp_ns)

    stats_out: list[ServoStats] = []

    def servo_main() -> None:
        stats_out.append(
            run_servo(
                graph,
                {FrameId.NEEDLE_SENSOR: needle_box, FrameId.CAUTERY_TIP: tip_box},
                mesh_box,
                cfg_box,
                state_box,
                WallClock(),
                rate_hz=servo_rate_hz,
                stop=stop,
                pre_tick=pre_tick,
                on_state=on_state,
                stats_box=stats_box,
            )
        )

    tumor_local = scenario.tumor.local()
    hub = BridgeHub(
        state_box=state_box,
        mesh_box=mesh_box,
        cfg_box=cfg_box,
        goal_box=goal_box,
        cut_box=cut_box,
        stats_box=stats_box,
        anchor_pose=lambda: live["meas"],
        margin_fn=lambda p: float(tumor_local.signed_distance(np.asarray(p, float)[None])[0]),
    )
    bridge = UiBridge(hub, host=host, port=ui_port, rate_hz=bridge_rate_hz, static_dir=static_dir)
    servo_thread = threading.Thread(target=servo_main, name="servo", daemon=True)
    return ServeSession(scenario, hub, bridge, wire, stop, servo_thread, stats_out)


def resolve_ui_assets(explicit: Optional[str]) -> Optional[Path]:
    """Locate the built navigation console; explicit paths must exist."""
    if explicit is not None:
        p = Path(explicit)
        if not (p / "index.html").is_file():
            raise ConfigError(f"no index.html under --ui-assets dir: {p}")
        return p
    p = Path("frontend") / "dist"
    return p if (p / "index.html").is_file() else None


def cmd_serve(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.seed)
    static_dir = resolve_ui_assets(args.ui_assets)
    session = build_serve_session(
        cfg, host=args.host, port=args.port, ui_port=args.ui_port, static_dir=static_dir
    )

    interrupted = threading.Event()
    previous = signal.signal(signal.SIGINT, lambda signum, frame: interrupted.set())
    try:
        session.start()
        console = (
            f"console on http://{args.host}:{session.ui_port}/"
            if static_dir is not None
            else f"console assets not built (ws only on {session.ui_port})"
        )
        print(
            f"serving: transforms on tcp://{args.host}:{session.wire_port}, "
            f"ui bridge on ws://{args.host}:{session.ui_port}, {console} (ctrl-c to stop)",
            flush=True,
        )
        while not interrupted.is_set():
            interrupted.wait(0.2)
    finally:
        signal.signal(signal.SIGINT, previous)
        stats = session.shutdown()
        if stats is not None:
            print(stats.as_text(), flush=True)
    return EXIT_OK


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hapticfence",
        description="Forbidden-region virtual fixture guidance: scenarios, headless runs, live serving.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scenario", help="generate a scenario and write its artifacts")
    p.add_argument("--config", help="scenario config JSON (package defaults when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", default="scenario_out", help="output directory")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("run", help="run headless resections and write reports")
    p.add_argument("--config", help="scenario config JSON (package defaults when omitted)")
    p.add_argument("--seed", type=int, help="first seed (config seed when omitted)")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    arm = p.add_mutually_exclusive_group()
    arm.add_argument("--guided", action="store_true", help="guided arm only")
    arm.add_argument("--unguided", action="store_true", help="unguided arm only")
    arm.add_argument("--both", action="store_true", help="both arms (default)")
    p.add_argument("--out", default="run_out", help="output directory")
    p.add_argument(
        "--virtual-clock",
        action="store_true",
        help="headless runs always use the virtual clock; flag kept so manifests can say so",
    )
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("serve", help="serve a live session until interrupted")
    p.add_argument("--config", help="scenario config JSON (package defaults when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_PORT, help="transform stream TCP port")
    p.add_argument("--ui-port", type=int, default=DEFAULT_UI_PORT, help="UI bridge WebSocket port")
    p.add_argument(
        "--ui-assets",
        help="directory with the built navigation console (default: frontend/dist if present)",
    )
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TumorOutOfBounds) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HapticFenceError, OSError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
