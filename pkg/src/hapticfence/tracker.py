"""Simulated EM tracker: scripted rigid motion plus per-sample Gaussian noise,
trajectory recording/replay, and the scripted tool controllers that stand in
for human operators in guided/unguided experiments.

Everything is seeded: (seed, config) fully determines every sample and every
controller goal.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Protocol, Sequence

import numpy as np

from .engine import ProxyState
from .frames import FrameId, RigidTransform
from .geometry import FixtureMesh, ray_exit

DEFAULT_RATE_HZ = 60.0
TRAJECTORY_HEADER = [
    "t_ns", "frame",
    "r00", "r01", "r02", "r10", "r11", "r12", "r20", "r21", "r22",
    "tx", "ty", "tz", "valid",
]


@dataclass(frozen=True)
class TrackerSample:
    frame: FrameId
    pose: RigidTransform  # sensor -> Tracker
    timestamp_ns: int
    valid: bool = True


@dataclass(frozen=True)
class NoiseModel:
    pos_sigma: float = 0.7  # mm per axis; ~1.21 mm 3D RMS
    rot_sigma_deg: float = 0.2  # degrees per axis
    seed: int = 0
    dropout_rate: float = 0.0  # probability a sample is emitted with valid=False

    def __post_init__(self) -> None:
        if self.pos_sigma < 0 or self.rot_sigma_deg < 0:
            raise ValueError("noise sigmas must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass(frozen=True)
class MotionScript:
    """Translation-only rigid motion of a frame over time.

    kinds: static | drift (random walk, resampled at the stream rate) |
    sinusoid (along `axis`) | waypoints (piecewise-linear (t_s, xyz) knots).
    Displacement never exceeds max_displacement_mm.
    """

    kind: str = "static"
    amplitude_mm: float = 5.0
    period_s: float = 20.0
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    step_sigma_mm_per_s: float = 1.0
    max_displacement_mm: float = 20.0
    waypoints: tuple[tuple[float, tuple[float, float, float]], ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("static", "drift", "sinusoid", "waypoints"):
            raise ValueError(f"unknown motion kind {self.kind!r}")
        if self.kind == "sinusoid":
            if self.period_s <= 0:
                raise ValueError("sinusoid period must be > 0")
            if self.amplitude_mm > self.max_displacement_mm:
                raise ValueError("amplitude exceeds max_displacement_mm")
        if self.kind == "waypoints":
            ts = [t for t, _ in self.waypoints]
            if len(ts) < 2 or sorted(ts) != ts:
                raise ValueError("waypoints need >= 2 knots with increasing times")


class _DriftState:
    """Random-walk displacements sampled on the stream grid, grown on demand."""

    def __init__(self, script: MotionScript, rng: np.random.Generator, rate_hz: float):
        self.script = script
        self.rng = rng
        self.dt = 1.0 / rate_hz
        self.path = [np.zeros(3)]

    def at(self, index: int) -> np.ndarray:
        while len(self.path) <= index:
            step = self.rng.normal(0.0, self.script.step_sigma_mm_per_s * math.sqrt(self.dt), 3)
            nxt = self.path[-1] + step
            r = np.linalg.norm(nxt)
            if r > self.script.max_displacement_mm:
                nxt *= self.script.max_displacement_mm / r
            self.path.append(nxt)
        return self.path[index]


def _script_displacement(script: MotionScript, t_s: float) -> np.ndarray:
    if script.kind == "static" or script.kind == "drift":
        return np.zeros(3)  # drift handled statefully by the simulator
    if script.kind == "sinusoid":
        u = np.asarray(script.axis, dtype=np.float64)
        u /= np.linalg.norm(u)
        return u * (script.amplitude_mm * math.sin(2 * math.pi * t_s / script.period_s))
    knots_t = np.array([t for t, _ in script.waypoints])
    knots_p = np.array([p for _, p in script.waypoints], dtype=np.float64)
    out = np.array([np.interp(t_s, knots_t, knots_p[:, i]) for i in range(3)])
    r = np.linalg.norm(out)
    if r > script.max_displacement_mm:
        out *= script.max_displacement_mm / r
    return out


@dataclass(frozen=True)
class FrameMotion:
    base_pose: RigidTransform  # sensor -> Tracker at t = 0
    script: MotionScript = MotionScript()


class TrackerSimulator:
    """Streams noisy sensor->Tracker samples for a set of frames.

    Per-frame noise/dropout/drift generators are spawned from one seed, so the
    emitted sequence is a pure function of (frames config, NoiseModel, rate).
    """

    def __init__(
        self,
        motions: Mapping[FrameId, FrameMotion],
        noise: NoiseModel = NoiseModel(),
        rate_hz: float = DEFAULT_RATE_HZ,
    ):
        if rate_hz <= 0:
            raise ValueError("rate_hz must be > 0")
        self.motions = dict(motions)
        self.noise = noise
        self.rate_hz = rate_hz
        self._order = sorted(self.motions, key=lambda f: f.value)
        children = np.random.SeedSequence(noise.seed).spawn(3 * len(self._order))
        self._noise_rng = {}
        self._drop_rng = {}
        self._drift = {}
        for i, frame in enumerate(self._order):
            self._noise_rng[frame] = np.random.default_rng(children[3 * i])
            self._drop_rng[frame] = np.random.default_rng(children[3 * i + 1])
            self._drift[frame] = _DriftState(
                self.motions[frame].script, np.random.default_rng(children[3 * i + 2]), rate_hz
            )

    def true_pose(self, frame: FrameId, t_ns: int) -> RigidTransform:
        m = self.motions[frame]
        t_s = t_ns * 1e-9
        disp = _script_displacement(m.script, t_s)
        if m.script.kind == "drift":
            disp = self._drift[frame].at(int(round(t_s * self.rate_hz)))
        return RigidTransform(m.base_pose.rotation, m.base_pose.translation + disp)

    def _noisy(self, frame: FrameId, pose: RigidTransform) -> RigidTransform:
        rng = self._noise_rng[frame]
        dp = rng.normal(0.0, self.noise.pos_sigma, 3)
        rv = rng.normal(0.0, math.radians(self.noise.rot_sigma_deg), 3)
        wobble = RigidTransform.from_rotvec(rv, np.zeros(3))
        return RigidTransform(wobble.rotation @ pose.rotation, pose.translation + dp)

    def sample(self, frame: FrameId, tick: int) -> TrackerSample:
        t_ns = int(round(tick * 1e9 / self.rate_hz))
        pose = self._noisy(frame, self.true_pose(frame, t_ns))
        valid = True
        if self.noise.dropout_rate > 0.0:
            valid = bool(self._drop_rng[frame].random() >= self.noise.dropout_rate)
        return TrackerSample(frame, pose, t_ns, valid)

    def stream(self, duration_s: float) -> Iterator[TrackerSample]:
        n = int(round(duration_s * self.rate_hz))
        for tick in range(n):
            for frame in self._order:
                yield self.sample(frame, tick)


# -- trajectory recording / replay --------------------------------------------


@dataclass(frozen=True)
class TrajectorySample:
    t_ns: int
    frame: FrameId
    pose: RigidTransform
    valid: bool = True
    cutting: bool = False  # in-memory annotation; not part of the CSV schema


@dataclass
class Trajectory:
    samples: list[TrajectorySample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def append(self, s: TrajectorySample) -> None:
        self.samples.append(s)

    def positions(self, cutting_only: bool = False) -> np.ndarray:
        rows = [s.pose.translation for s in self.samples if s.valid and (s.cutting or not cutting_only)]
        return np.array(rows).reshape(-1, 3)

    def cutting(self) -> "Trajectory":
        return Trajectory([s for s in self.samples if s.cutting])

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAJECTORY_HEADER)
            for s in self.samples:
                r = s.pose.rotation.reshape(-1)
                t = s.pose.translation
                w.writerow(
                    [s.t_ns, s.frame.value]
                    + [repr(float(x)) for x in r]
                    + [repr(float(x)) for x in t]
                    + [int(s.valid)]
                )

    @classmethod
    def load_csv(cls, path) -> "Trajectory":
        out = cls()
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != TRAJECTORY_HEADER:
                raise ValueError(f"unexpected trajectory header: {header}")
            for row in reader:
                t_ns = int(row[0])
                frame = FrameId(row[1])
                rot = np.array([float(x) for x in row[2:11]]).reshape(3, 3)
                trans = np.array([float(x) for x in row[11:14]])
                out.append(TrajectorySample(t_ns, frame, RigidTransform(rot, trans), bool(int(row[14]))))
        return out


# -- scripted controllers ------------------------------------------------------


class Controller(Protocol):
    def next_goal(self, t_ns: int, state: ProxyState | None) -> tuple[np.ndarray, bool]:
        """Return (goal position in the tumor frame, cutting flag)."""
        ...

    @property
    def done(self) -> bool: ...


def fibonacci_directions(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = np.pi * (1 + np.sqrt(5)) * k
    return np.column_stack([np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)])


def serpentine_order(dirs: np.ndarray) -> np.ndarray:
    """Visit order over unit directions: latitude bands swept with alternating
    azimuth sense, so consecutive hops stay short instead of leaping across
    the sphere (a straight-line leap would drag a cutting tool through the
    interior)."""
    n = len(dirs)
    n_bands = max(1, int(round(math.sqrt(n * math.pi) / 2)))
    phi = np.arccos(np.clip(dirs[:, 2], -1.0, 1.0))
    theta = np.arctan2(dirs[:, 1], dirs[:, 0])
    band = np.minimum((phi / math.pi * n_bands).astype(int), n_bands - 1)
    order: list[int] = []
    for b in range(n_bands):
        idx = np.nonzero(band == b)[0]
        idx = idx[np.argsort(theta[idx])]
        if b % 2 == 1:
            idx = idx[::-1]
        order.extend(idx.tolist())
    return np.array(order, dtype=np.int64)


class CompliantController:
    """Palpating sweep of the displayed (inflated) fixture surface.

    Visits a quasi-uniform set of surface targets; for each one it approaches
    from outside, presses until debounced contact at a small force, marks the
    press as cutting, then retreats along the force direction until free.
    Goals never go deeper than first contact + depth_cap_mm.  Without force
    feedback (fixture disabled) the press simply stops at the planned surface
    point: raw path following.
    """

    def __init__(
        self,
        displayed: FixtureMesh,
        n_targets: int | None = None,
        speed_mm_per_tick: float = 0.1,
        approach_mm: float = 3.0,
        press_force_n: float = 0.5,
        depth_cap_mm: float = 2.0,
        debounce_ticks: int = 8,
    ):
        self.mesh = displayed
        self.speed = speed_mm_per_tick
        self.approach = approach_mm
        self.press_force = press_force_n
        self.depth_cap = depth_cap_mm
        self.debounce = debounce_ticks
        if n_targets is None:
            a, b = displayed.corners()
            area_proxy = float(np.prod(b - a)) ** (2.0 / 3.0) * 6.0
            n_targets = int(np.clip(area_proxy / 9.0, 300, 800))
        dirs = fibonacci_directions(n_targets)
        center = displayed.centroid
        dist = ray_exit(displayed, center, dirs)
        self.targets = center + dist[:, None] * dirs  # on-surface sweep plan
        self.normals_out = dirs  # radial approach directions
        self._i = 0
        self._phase = "approach"
        self._goal = self.targets[0] + self.normals_out[0] * self.approach
        self._contact_streak = 0
        self._first_contact_goal: np.ndarray | None = None
        self._done = False

    @property
    def done(self) -> bool:
        return self._done

    def _advance_target(self) -> None:
        self._i += 1
        if self._i >= len(self.targets):
            self._done = True
            return
        self._phase = "approach"
        self._goal = self.targets[self._i] + self.normals_out[self._i] * self.approach
        self._contact_streak = 0
        self._first_contact_goal = None

    def next_goal(self, t_ns: int, state: ProxyState | None) -> tuple[np.ndarray, bool]:
        if self._done:
            return self._goal.copy(), False
        i = self._i
        target = self.targets[i]
        inward = -self.normals_out[i]
        in_contact = bool(state is not None and state.in_contact)
        force = np.zeros(3) if state is None else state.force
        cutting = False

        if self._phase == "approach":
            step = target - self._goal
            d = np.linalg.norm(step)
            if d <= self.speed:
                self._phase = "press"
            else:
                self._goal = self._goal + step / d * self.speed

        elif self._phase == "press":
            if in_contact:
                self._contact_streak += 1
                if self._first_contact_goal is None:
                    self._first_contact_goal = self._goal.copy()
            else:
                self._contact_streak = 0
            cutting = in_contact
            pressed_enough = (
                self._contact_streak >= self.debounce and np.linalg.norm(force) >= self.press_force
            )
            deep_enough = (
                self._first_contact_goal is not None
                and np.linalg.norm(self._goal - self._first_contact_goal) >= self.depth_cap - self.speed
            )
            # Raw path following when no feedback ever arrives: stop at the
            # planned surface point plus a nominal press depth.
            overshoot = float(np.dot(self._goal - target, inward))
            if pressed_enough or deep_enough or (not in_contact and overshoot >= self.depth_cap - self.speed):
                self._phase = "retreat"
            else:
                self._goal = self._goal + inward * self.speed

        else:  # retreat
            cutting = in_contact
            if in_contact and np.linalg.norm(force) > 0:
                out_dir = force / np.linalg.norm(force)
            else:
                out_dir = -inward
            self._goal = self._goal + out_dir * self.speed
            released = not in_contact and float(np.dot(self._goal - target, -inward)) >= self.approach * 0.9
            if released:
                self._advance_target()

        return self._goal.copy(), cutting


class AggressiveController:
    """Traces the initially contoured boundary, shifted by one constant
    localization bias drawn per run, ignoring force feedback entirely."""

    def __init__(
        self,
        planned: FixtureMesh,
        bias_mm: float = 0.0,
        seed: int = 0,
        n_targets: int = 600,
        speed_mm_per_tick: float = 0.2,
    ):
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.bias = rng.normal(0.0, bias_mm, 3) if bias_mm > 0 else np.zeros(3)
        dirs = fibonacci_directions(n_targets)
        center = planned.centroid
        dist = ray_exit(planned, center, dirs)
        order = serpentine_order(dirs)
        self.path = (center + dist[:, None] * dirs + self.bias)[order]
        self.speed = speed_mm_per_tick
        self._i = 0
        self._goal = self.path[0].copy()
        self._done = False

    @property
    def done(self) -> bool:
        return self._done

    def next_goal(self, t_ns: int, state: ProxyState | None) -> tuple[np.ndarray, bool]:
        if self._done:
            return self._goal.copy(), False
        target = self.path[self._i]
        step = target - self._goal
        d = np.linalg.norm(step)
        if d <= self.speed:
            self._goal = target.copy()
            self._i += 1
            if self._i >= len(self.path):
                self._done = True
        else:
            self._goal = self._goal + step / d * self.speed
        return self._goal.copy(), True


class ReplayController:
    """Re-emits a recorded tip trajectory (zero-order hold between samples)."""

    def __init__(self, trajectory: Trajectory):
        if len(trajectory) == 0:
            raise ValueError("cannot replay an empty trajectory")
        self.samples = sorted(trajectory.samples, key=lambda s: s.t_ns)
        self._i = 0

    @property
    def done(self) -> bool:
        return self._i >= len(self.samples) - 1

    def next_goal(self, t_ns: int, state: ProxyState | None) -> tuple[np.ndarray, bool]:
        while self._i + 1 < len(self.samples) and self.samples[self._i + 1].t_ns <= t_ns:
            self._i += 1
        s = self.samples[self._i]
        return s.pose.translation.copy(), s.cutting
