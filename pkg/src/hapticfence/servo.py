"""1 kHz haptic servo decoupled from slower producers and consumers.

Producers (tracker streams, mesh/config updates) and consumers (navigation,
recorders) exchange immutable snapshots through latest-value mailboxes; the
servo never blocks on either side.  Two clocks: a wall clock with a hybrid
sleep-then-spin wait for timing runs, and a virtual clock stepping exact 1 ms
increments for deterministic tests.
"""

from __future__ import annotations

import dataclasses
import gc
import os
import threading
import time
from dataclasses import dataclass
from typing import Callable, Generic, Mapping, NamedTuple, Optional, Protocol, TypeVar

import numpy as np

from .engine import ProxyState, VfConfig, step_proxy
from .frames import FrameGraph, FrameId
from .geometry import FixtureMesh
from .tracker import TrackerSample

T = TypeVar("T")

STALENESS_BUDGET_MS = 50.0
RAMP_MS = 500.0
KICK_THRESHOLD_MM = 2.0
_SPIN_NS = 200_000  # finish the last stretch of each wait busy-spinning
_RT_PRIORITY = 50


def _elevate_scheduling():
    """Request FIFO scheduling for the calling thread; None when unavailable.

    The servo thread is supposed to outrank everything else in the process.
    Needs privileges on Linux, so failure is expected and silent; returns the
    previous (policy, param) for restoration.
    """
    if not hasattr(os, "sched_setscheduler"):
        return None
    try:
        previous = (os.sched_getscheduler(0), os.sched_getparam(0))
        os.sched_setscheduler(0, os.SCHED_FIFO, os.sched_param(_RT_PRIORITY))
        return previous
    except (OSError, PermissionError):
        return None


def _restore_scheduling(previous) -> None:
    if previous is None:
        return
    try:
        os.sched_setscheduler(0, previous[0], previous[1])
    except (OSError, PermissionError):
        pass


class MailboxSnapshot(NamedTuple):
    value: object
    seq: int
    timestamp_ns: int


class Mailbox(Generic[T]):
    """Single-slot latest-value exchange: writers overwrite, readers always see
    one complete (value, seq, timestamp) triple."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._value: Optional[T] = None
        self._seq = 0
        self._timestamp_ns = 0

    def put(self, value: T, timestamp_ns: int = 0) -> int:
        with self._lock:
            self._value = value
            self._seq += 1
            self._timestamp_ns = timestamp_ns
            return self._seq

    def read(self) -> Optional[MailboxSnapshot]:
        with self._lock:
            if self._seq == 0:
                return None
            return MailboxSnapshot(self._value, self._seq, self._timestamp_ns)


class Clock(Protocol):
    def now_ns(self) -> int: ...
    def sleep_until(self, deadline_ns: int) -> None: ...


class WallClock:
    def now_ns(self) -> int:
        return time.monotonic_ns()

    def sleep_until(self, deadline_ns: int) -> None:
        while True:
            remaining = deadline_ns - time.monotonic_ns()
            if remaining <= 0:
                return
            if remaining > _SPIN_NS:
                time.sleep((remaining - _SPIN_NS) / 1e9)
            # else: spin out the tail for low jitter


class VirtualClock:
    """Deterministic clock: time advances only through sleep_until."""

    def __init__(self, start_ns: int = 0) -> None:
        self._now = start_ns

    def now_ns(self) -> int:
        return self._now

    def sleep_until(self, deadline_ns: int) -> None:
        if deadline_ns > self._now:
            self._now = deadline_ns


@dataclass(frozen=True)
class ServoStats:
    tick_count: int
    mean_period_ns: float
    p99_period_ns: float
    max_period_ns: int
    mean_compute_ns: float
    overrun_count: int
    stale_tick_count: int = 0

    def __post_init__(self) -> None:
        for name in ("tick_count", "mean_period_ns", "p99_period_ns", "max_period_ns",
                     "mean_compute_ns", "overrun_count", "stale_tick_count"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def as_text(self) -> str:
        return "\n".join(f"{k} {v}" for k, v in dataclasses.asdict(self).items()) + "\n"

    @staticmethod
    def csv_header() -> str:
        return ",".join(f.name for f in dataclasses.fields(ServoStats))

    def as_csv_row(self) -> str:
        return ",".join(repr(v) if isinstance(v, float) else str(v)
                        for v in dataclasses.astuple(self))


@dataclass(frozen=True)
class NavStats:
    emitted: int
    dropped: int
    stale_emits: int


def _percentile99(values: np.ndarray) -> float:
    return float(np.percentile(values, 99)) if len(values) else 0.0


def run_servo(
    graph: FrameGraph,
    pose_boxes: Mapping[FrameId, "Mailbox[TrackerSample]"],
    mesh_box: "Mailbox[FixtureMesh]",
    config_box: "Mailbox[VfConfig]",
    out_box: "Mailbox[ProxyState]",
    clock: Clock,
    rate_hz: float = 1000.0,
    duration_s: float | None = None,
    stop: threading.Event | None = None,
    tip_frame: FrameId = FrameId.CAUTERY_TIP,
    tumor_frame: FrameId = FrameId.NEEDLE_SENSOR,
    staleness_budget_ms: float = STALENESS_BUDGET_MS,
    ramp_ms: float = RAMP_MS,
    kick_threshold_mm: float = KICK_THRESHOLD_MM,
    pre_tick: Callable[[int], None] | None = None,
    on_state: Callable[[ProxyState], None] | None = None,
    stats_box: "Mailbox[ServoStats] | None" = None,
) -> ServoStats:
    """Run the haptic loop until the duration elapses or `stop` is set.

    Each tick: apply fresh tracker samples to the frame graph, express the
    tool tip in the tumor frame, step the proxy against the latest fixture,
    and publish the resulting state.  Tracker input older than the staleness
    budget zeroes the force and flags the state stale; poses are never
    extrapolated.  A contact onset deeper than `kick_threshold_mm` (fixture
    re-anchored around the tool, teleported goal) ramps the force in linearly
    over `ramp_ms` instead of kicking at full magnitude.

    The graph must already hold the static edges (tracker mount, tip offset);
    mesh_box must be populated before the loop starts.
    """
    if mesh_box.read() is None:
        raise RuntimeError("fixture mailbox must be populated before the servo starts")
    period_ns = int(round(1e9 / rate_hz))
    budget_ns = int(staleness_budget_ms * 1e6)
    ramp_ns = int(ramp_ms * 1e6)

    last_pose_seq: dict[FrameId, int] = {f: 0 for f in pose_boxes}
    last_valid_ns: dict[FrameId, int] = {}
    prev_state: ProxyState | None = None
    last_goal = np.zeros(3)
    have_goal = False
    ramp_start_ns: int | None = None
    last_mesh_seq = 0

    tick_starts: list[int] = []
    computes: list[int] = []
    overruns = 0
    stale_ticks = 0
    ticks = 0

    gc_was_enabled = gc.isenabled()
    sched_previous = None
    if isinstance(clock, WallClock):
        if gc_was_enabled:
            gc.disable()
        sched_previous = _elevate_scheduling()
    try:
        start_ns = clock.now_ns()
        end_ns = None if duration_s is None else start_ns + int(duration_s * 1e9)
        deadline = start_ns
        while True:
            if stop is not None and stop.is_set():
                break
            now = clock.now_ns()
            if end_ns is not None and now >= end_ns:
                break
            if pre_tick is not None:
                pre_tick(now)

            t0 = clock.now_ns()
            tick_starts.append(t0)

            # Snapshot one coherent input set for this tick.
            for frame, box in pose_boxes.items():
                snap = box.read()
                if snap is None or snap.seq == last_pose_seq[frame]:
                    continue
                last_pose_seq[frame] = snap.seq
                sample: TrackerSample = snap.value
                if sample.valid:
                    graph.set_edge(FrameId.TRACKER, sample.frame, sample.pose, sample.timestamp_ns)
                    last_valid_ns[frame] = sample.timestamp_ns
            mesh_snap = mesh_box.read()
            cfg_snap = config_box.read()
            mesh: FixtureMesh = mesh_snap.value
            cfg: VfConfig = cfg_snap.value if cfg_snap is not None else VfConfig()

            stale = any(f not in last_valid_ns or now - last_valid_ns[f] > budget_ns for f in pose_boxes)
            if not stale:
                last_goal = graph.resolve(tip_frame, tumor_frame).translation
                have_goal = True

            if stale or not have_goal:
                state = ProxyState.free(
                    last_goal, now, None if prev_state is None else prev_state.proxy, stale=True
                )
                stale_ticks += 1
                ramp_start_ns = None
            else:
                state = step_proxy(mesh, prev_state, last_goal, cfg, timestamp_ns=now)
                onset = state.in_contact and (prev_state is None or not prev_state.in_contact)
                reanchored = state.in_contact and mesh_snap.seq != last_mesh_seq and last_mesh_seq != 0
                if (onset or reanchored) and state.depth_mm > kick_threshold_mm:
                    # Back-date by one period so the onset tick already carries
                    # a small nonzero force and full force lands at ramp_ms.
                    ramp_start_ns = now - period_ns
                if not state.in_contact:
                    ramp_start_ns = None
                if ramp_start_ns is not None and ramp_ns > 0:
                    frac = (now - ramp_start_ns) / ramp_ns
                    if frac >= 1.0:
                        ramp_start_ns = None
                    else:
                        state = dataclasses.replace(state, force=state.force * frac)
            last_mesh_seq = mesh_snap.seq

            prev_state = state
            out_box.put(state, timestamp_ns=state.timestamp_ns)
            if on_state is not None:
                on_state(state)

            ticks += 1
            computes.append(clock.now_ns() - t0)
            if computes[-1] > period_ns:
                overruns += 1
            if stats_box is not None and ticks % 1024 == 0:
                # live snapshot over the recent window; cost lands in sleep slack
                recent = np.diff(np.asarray(tick_starts[-2049:], dtype=np.int64))
                rcomp = np.asarray(computes[-2048:], dtype=np.int64)
                stats_box.put(
                    ServoStats(
                        tick_count=ticks,
                        mean_period_ns=float(recent.mean()) if len(recent) else 0.0,
                        p99_period_ns=_percentile99(recent),
                        max_period_ns=int(recent.max()) if len(recent) else 0,
                        mean_compute_ns=float(rcomp.mean()),
                        overrun_count=overruns,
                        stale_tick_count=stale_ticks,
                    ),
                    timestamp_ns=now,
                )
            deadline += period_ns
            clock.sleep_until(deadline)
    finally:
        _restore_scheduling(sched_previous)
        if isinstance(clock, WallClock) and gc_was_enabled:
            gc.enable()

    periods = np.diff(np.asarray(tick_starts, dtype=np.int64)) if len(tick_starts) > 1 else np.array([])
    comp = np.asarray(computes, dtype=np.int64)
    return ServoStats(
        tick_count=ticks,
        mean_period_ns=float(periods.mean()) if len(periods) else 0.0,
        p99_period_ns=_percentile99(periods),
        max_period_ns=int(periods.max()) if len(periods) else 0,
        mean_compute_ns=float(comp.mean()) if len(comp) else 0.0,
        overrun_count=overruns,
        stale_tick_count=stale_ticks,
    )


def run_navigation(
    in_box: "Mailbox[ProxyState]",
    sink: Callable[[ProxyState], None],
    clock: Clock,
    rate_hz: float = 30.0,
    duration_s: float | None = None,
    stop: threading.Event | None = None,
) -> NavStats:
    """Down-sample the servo's output mailbox into a slower consumer.

    Skipped servo states are dropped by design (drop count returned).  When
    the producer has stopped, the last state is re-emitted flagged stale.
    """
    period_ns = int(round(1e9 / rate_hz))
    emitted = dropped = stale_emits = 0
    last_seq = 0
    start = clock.now_ns()
    end_ns = None if duration_s is None else start + int(duration_s * 1e9)
    deadline = start
    while True:
        if stop is not None and stop.is_set():
            break
        now = clock.now_ns()
        if end_ns is not None and now >= end_ns:
            break
        snap = in_box.read()
        if snap is not None:
            state: ProxyState = snap.value
            if snap.seq == last_seq:
                sink(dataclasses.replace(state, stale=True))
                stale_emits += 1
            else:
                dropped += max(0, snap.seq - last_seq - 1)
                last_seq = snap.seq
                sink(state)
            emitted += 1
        deadline += period_ns
        clock.sleep_until(deadline)
    return NavStats(emitted=emitted, dropped=dropped, stale_emits=stale_emits)
