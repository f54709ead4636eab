"""Synthetic phantom scenarios and resection experiments.

A scenario is a box phantom holding one ellipsoidal tumor.  Contouring is
simulated as parallel image slices of the tumor plus a safety margin, with
per-point radial jitter standing in for sonographer error.  Experiments drive
a scripted controller through the 1 kHz servo on a virtual clock and score the
recorded tool path against the TRUE analytic tumor, never the contoured hull.
"""

from __future__ import annotations

import dataclasses
import json
import math
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import ConvexHull as _Hull
from scipy.spatial import QhullError

from .engine import ProxyState, VfConfig
from .errors import ConfigError, EmptyTrajectory, TumorOutOfBounds
from .frames import FrameGraph, FrameId, RigidTransform
from .geometry import Contour, ContourStack, FixtureMesh, contours_to_points, convex_hull, inflate
from .servo import Mailbox, VirtualClock, run_servo
from .tracker import (
    AggressiveController,
    CompliantController,
    FrameMotion,
    MotionScript,
    NoiseModel,
    TrackerSample,
    TrackerSimulator,
    Trajectory,
    TrajectorySample,
)

MARGIN_THRESHOLD_MM = 2.0
MIN_CLEARANCE_MM = 5.0
SCHEMA_VERSION = 1


# -- analytic tumor ------------------------------------------------------------


def _ellipsoid_distance_local(semi_axes: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Exact signed Euclidean distance to an origin-centred axis-aligned
    ellipsoid; positive outside.

    Solves the foot-point condition sum((a_i p_i / (a_i^2 + t))^2) = 1 by
    bisection; f is monotone in t so the root is unique per branch.  Interior
    points whose nearest-axis coordinates vanish have no root (the medial
    case) and fall back to the closed-form cap solution.
    """
    a = np.asarray(semi_axes, dtype=np.float64)
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = np.empty(len(p))
    if a.max() - a.min() <= 1e-12 * a.max():  # sphere: trivial and exact
        return np.linalg.norm(p, axis=1) - float(a.mean())

    level = np.einsum("ij,j->i", p * p, 1.0 / (a * a))
    outside = level > 1.0

    if outside.any():
        q = p[outside]
        lo = np.zeros(len(q))
        hi = a.max() * np.linalg.norm(q, axis=1) + a.max() ** 2 + 1.0
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            f = np.einsum("ij->i", (a * q / (a * a + mid[:, None])) ** 2)
            go_right = f > 1.0
            lo = np.where(go_right, mid, lo)
            hi = np.where(go_right, hi, mid)
        t = 0.5 * (lo + hi)
        foot = (a * a) * q / (a * a + t[:, None])
        out[outside] = np.linalg.norm(foot - q, axis=1)

    inside = ~outside
    if inside.any():
        q = p[inside]
        amin2 = a.min() ** 2
        floor = -amin2 * (1.0 - 1e-12)
        f_floor = np.einsum("ij->i", (a * q / (a * a + floor)) ** 2)
        rooted = f_floor >= 1.0

        d = np.empty(len(q))
        if rooted.any():
            r = q[rooted]
            lo = np.full(len(r), floor)
            hi = np.zeros(len(r))
            for _ in range(100):
                mid = 0.5 * (lo + hi)
                f = np.einsum("ij->i", (a * r / (a * a + mid[:, None])) ** 2)
                go_right = f > 1.0
                lo = np.where(go_right, mid, lo)
                hi = np.where(go_right, hi, mid)
            t = 0.5 * (lo + hi)
            foot = (a * a) * r / (a * a + t[:, None])
            d[rooted] = np.linalg.norm(foot - r, axis=1)
        if (~rooted).any():
            # Medial cap: coordinates on the shortest axes are zero, the foot
            # sits off-axis on a circle of slack radius.
            r = q[~rooted]
            tied = a * a - amin2 <= 1e-12 * amin2
            foot = np.zeros_like(r)
            foot[:, ~tied] = (a[~tied] ** 2) * r[:, ~tied] / (a[~tied] ** 2 - amin2)
            slack = 1.0 - np.einsum("ij,j->i", foot[:, ~tied] ** 2, 1.0 / a[~tied] ** 2)
            ring2 = amin2 * np.clip(slack, 0.0, None)
            d[~rooted] = np.sqrt(
                np.einsum("ij->i", (foot[:, ~tied] - r[:, ~tied]) ** 2) + ring2
            )
        out[inside] = -d
    return out


@dataclass(frozen=True)
class Ellipsoid:
    """Axis-aligned semi-axes in the local frame; pose maps local -> world."""

    semi_axes: np.ndarray
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self) -> None:
        a = np.asarray(self.semi_axes, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(a)) or np.any(a <= 0):
            raise ValueError("semi-axes must be positive and finite")
        object.__setattr__(self, "semi_axes", a)

    def volume(self) -> float:
        return 4.0 / 3.0 * math.pi * float(np.prod(self.semi_axes))

    def local(self) -> "Ellipsoid":
        return Ellipsoid(self.semi_axes.copy())

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        """Exact signed distance in mm, positive outside the surface."""
        q = self.pose.inverse().apply(np.atleast_2d(points))
        a = self.semi_axes
        if a.max() - a.min() <= 1e-12 * a.max():
            d = np.linalg.norm(q, axis=1) - float(a.mean())
        else:
            d = _ellipsoid_distance_local(a, q)
        return d if np.asarray(points).ndim > 1 else float(d[0])

    def support_halfwidths(self) -> np.ndarray:
        """Half-extent of the posed ellipsoid along each world axis."""
        return np.sqrt(((self.pose.rotation * self.semi_axes) ** 2).sum(axis=1))

    def surface_points(self, n: int) -> np.ndarray:
        """Quasi-uniform world-frame surface samples (area-biased on flat axes)."""
        k = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * k / n)
        theta = np.pi * (1 + np.sqrt(5)) * k
        u = np.column_stack([np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)])
        return self.pose.apply(u * self.semi_axes)

    def contains(self, points: np.ndarray) -> np.ndarray:
        q = self.pose.inverse().apply(np.atleast_2d(points))
        return np.einsum("ij,j->i", q * q, 1.0 / self.semi_axes**2) <= 1.0


@dataclass(frozen=True)
class PhantomBox:
    """Axis-aligned simulant block centred on the world origin."""

    dims: np.ndarray  # full edge lengths, mm

    def __post_init__(self) -> None:
        d = np.asarray(self.dims, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise ValueError("phantom dims must be positive and finite")
        object.__setattr__(self, "dims", d)

    def volume(self) -> float:
        return float(np.prod(self.dims))

    def contains(self, points: np.ndarray, shrink_mm: float = 0.0) -> np.ndarray:
        p = np.atleast_2d(points)
        half = self.dims / 2.0 - shrink_mm
        return np.all(np.abs(p) <= half, axis=1)


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class ControllerParams:
    compliant_targets: int = 300
    compliant_speed: float = 0.1
    compliant_depth_cap: float = 2.0
    compliant_press_force: float = 0.5
    aggressive_targets: int = 600
    aggressive_speed: float = 0.2
    bias_mm: float = 0.0


@dataclass(frozen=True)
class ScenarioConfig:
    phantom_mm: tuple[float, float, float] = (120.0, 120.0, 50.0)
    tumor_semi_axes_mm: tuple[float, float, float] = (17.5, 17.5, 17.5)
    tumor_center_mm: Optional[tuple[float, float, float]] = None  # None: seeded draw
    tumor_rotvec: tuple[float, float, float] = (0.0, 0.0, 0.0)
    slice_count: int = 15
    radial_jitter_mm: float = 0.5
    contour_margin_mm: float = 1.0
    points_per_contour: int = 64
    noise: NoiseModel = NoiseModel()
    motion: MotionScript = MotionScript()
    vf: VfConfig = VfConfig()
    controller: ControllerParams = ControllerParams()
    seed: int = 0
    max_duration_s: float = 240.0

    def __post_init__(self) -> None:
        a = np.asarray(self.tumor_semi_axes_mm, dtype=np.float64)
        if a.shape != (3,) or not np.all(np.isfinite(a)) or np.any(a <= 0):
            raise ConfigError("tumor_semi_axes_mm must be three positive numbers")
        diam = 2.0 * a
        if np.any(diam < 20.0) or np.any(diam > 50.0):
            raise ConfigError(
                f"tumor diameters {np.round(diam, 3).tolist()} mm outside the supported [20, 50] mm range"
            )
        if self.slice_count < 3:
            raise ConfigError("slice_count must be >= 3")
        if self.points_per_contour < 8:
            raise ConfigError("points_per_contour must be >= 8")
        if self.radial_jitter_mm < 0 or self.contour_margin_mm < 0:
            raise ConfigError("jitter and contour margin must be >= 0")
        if self.max_duration_s <= 0:
            raise ConfigError("max_duration_s must be > 0")

    def to_json(self) -> str:
        d = {
            "schema": SCHEMA_VERSION,
            "phantom_mm": list(self.phantom_mm),
            "tumor_semi_axes_mm": list(self.tumor_semi_axes_mm),
            "tumor_center_mm": None if self.tumor_center_mm is None else list(self.tumor_center_mm),
            "tumor_rotvec": list(self.tumor_rotvec),
            "slice_count": self.slice_count,
            "radial_jitter_mm": self.radial_jitter_mm,
            "contour_margin_mm": self.contour_margin_mm,
            "points_per_contour": self.points_per_contour,
            "noise": {
                "pos_sigma": self.noise.pos_sigma,
                "rot_sigma_deg": self.noise.rot_sigma_deg,
                "seed": self.noise.seed,
                "dropout_rate": self.noise.dropout_rate,
            },
            "motion": {
                "kind": self.motion.kind,
                "amplitude_mm": self.motion.amplitude_mm,
                "period_s": self.motion.period_s,
                "axis": list(self.motion.axis),
                "step_sigma_mm_per_s": self.motion.step_sigma_mm_per_s,
                "max_displacement_mm": self.motion.max_displacement_mm,
                "waypoints": [[t, list(p)] for t, p in self.motion.waypoints],
            },
            "vf": {
                "stiffness_k": self.vf.stiffness_k,
                "force_cap": self.vf.force_cap,
                "margin": self.vf.margin,
                "enabled": self.vf.enabled,
            },
            "controller": dataclasses.asdict(self.controller),
            "seed": self.seed,
            "max_duration_s": self.max_duration_s,
        }
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config root must be a JSON object")
        if d.get("schema") != SCHEMA_VERSION:
            raise ConfigError(f"config schema must be {SCHEMA_VERSION}, got {d.get('schema')!r}")
        known = {
            "schema", "phantom_mm", "tumor_semi_axes_mm", "tumor_center_mm", "tumor_rotvec",
            "slice_count", "radial_jitter_mm", "contour_margin_mm", "points_per_contour",
            "noise", "motion", "vf", "controller", "seed", "max_duration_s",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

        def grab(key, default, build=lambda x: x):
            if key not in d:
                return default
            try:
                return build(d[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from exc

        noise = grab("noise", cls.noise, lambda m: NoiseModel(**m))
        motion = grab(
            "motion",
            cls.motion,
            lambda m: MotionScript(
                **{
                    **m,
                    "axis": tuple(m.get("axis", (0.0, 0.0, 1.0))),
                    "waypoints": tuple((t, tuple(p)) for t, p in m.get("waypoints", ())),
                }
            ),
        )
        vf = grab("vf", cls.vf, lambda m: VfConfig(**m))
        controller = grab("controller", cls.controller, lambda m: ControllerParams(**m))
        center = d.get("tumor_center_mm")
        return cls(
            phantom_mm=grab("phantom_mm", cls.phantom_mm, lambda v: tuple(float(x) for x in v)),
            tumor_semi_axes_mm=grab(
                "tumor_semi_axes_mm", cls.tumor_semi_axes_mm, lambda v: tuple(float(x) for x in v)
            ),
            tumor_center_mm=None if center is None else tuple(float(x) for x in center),
            tumor_rotvec=grab("tumor_rotvec", cls.tumor_rotvec, lambda v: tuple(float(x) for x in v)),
            slice_count=grab("slice_count", cls.slice_count, int),
            radial_jitter_mm=grab("radial_jitter_mm", cls.radial_jitter_mm, float),
            contour_margin_mm=grab("contour_margin_mm", cls.contour_margin_mm, float),
            points_per_contour=grab("points_per_contour", cls.points_per_contour, int),
            noise=noise,
            motion=motion,
            vf=vf,
            controller=controller,
            seed=grab("seed", 0, int),
            max_duration_s=grab("max_duration_s", cls.max_duration_s, float),
        )


# -- scenario generation -------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    cfg: ScenarioConfig
    tumor: Ellipsoid  # world pose
    true_mesh: FixtureMesh  # tumor-local coordinates
    stack: ContourStack
    phantom: PhantomBox
    planned_hull: FixtureMesh  # contoured boundary, tumor-local
    anchor_pose: RigidTransform  # tumor sensor -> tracker at t = 0


def _seed_children(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def generate_scenario(cfg: ScenarioConfig) -> Scenario:
    """Deterministically build the phantom, true tumor, and contour stack."""
    phantom = PhantomBox(np.asarray(cfg.phantom_mm))
    rotation = RigidTransform.from_rotvec(cfg.tumor_rotvec).rotation
    semi = np.asarray(cfg.tumor_semi_axes_mm)

    kids = _seed_children(cfg.seed, 3)
    rng_place = np.random.default_rng(kids[0])
    rng_jitter = np.random.default_rng(kids[1])

    support = np.sqrt(((rotation * semi) ** 2).sum(axis=1))
    head = phantom.dims / 2.0 - support - MIN_CLEARANCE_MM
    if cfg.tumor_center_mm is not None:
        center = np.asarray(cfg.tumor_center_mm, dtype=np.float64)
        if np.any(np.abs(center) > head + 1e-9):
            raise TumorOutOfBounds(
                f"tumor at {center.tolist()} violates the {MIN_CLEARANCE_MM} mm clearance "
                f"inside a {phantom.dims.tolist()} mm phantom"
            )
    else:
        if np.any(head < 0):
            raise TumorOutOfBounds(
                f"no placement of this tumor keeps {MIN_CLEARANCE_MM} mm clearance "
                f"inside a {phantom.dims.tolist()} mm phantom"
            )
        center = rng_place.uniform(-head, head)

    anchor_pose = RigidTransform(rotation, center)
    tumor = Ellipsoid(semi, anchor_pose)

    contours = _contour_slices(tumor, cfg, rng_jitter)
    stack = ContourStack(tuple(contours), tumor_frame=FrameId.NEEDLE_SENSOR)

    graph = FrameGraph()
    graph.set_edge(FrameId.REFERENCE, FrameId.TRACKER, RigidTransform.identity())
    graph.set_edge(FrameId.TRACKER, FrameId.NEEDLE_SENSOR, anchor_pose)
    planned = convex_hull(contours_to_points(stack, graph))

    true_mesh = convex_hull(tumor.local().surface_points(800))
    return Scenario(cfg, tumor, true_mesh, stack, phantom, planned, anchor_pose)


def _contour_slices(tumor: Ellipsoid, cfg: ScenarioConfig, rng: np.random.Generator) -> list[Contour]:
    """Parallel world-z slices of the offset body (tumor dilated by the contour
    margin): each contour point is the exact offset-boundary radius plus jitter."""
    margin = cfg.contour_margin_mm
    n_slices, n_pts = cfg.slice_count, cfg.points_per_contour
    center = tumor.pose.translation
    w_z = float(tumor.support_halfwidths()[2])

    # Slice heights follow a polar-angle grid: dense near the equator is not
    # needed, but the caps must be closed tightly or the hull loses volume.
    theta0 = math.pi / (2 * n_slices)
    theta = np.linspace(theta0, math.pi - theta0, n_slices)
    z_rel = (w_z + margin) * np.cos(theta)

    # In-plane ray anchor: along the centre-to-top-support chord, which stays
    # inside the body, then clamped vertically for slices above the support.
    u_local = tumor.pose.rotation.T @ np.array([0.0, 0.0, 1.0])
    top_local = (tumor.semi_axes**2 * u_local) / w_z
    top_world = tumor.pose.apply(top_local)
    lam = np.clip(z_rel / w_z, -1.0, 1.0)
    anchors_xy = center[:2] + lam[:, None] * (top_world[:2] - center[:2])

    psi = np.linspace(0.0, 2 * math.pi, n_pts, endpoint=False)
    ray = np.column_stack([np.cos(psi), np.sin(psi)])

    # One flat bisection across every (slice, direction) pair for the radius
    # where distance-to-tumor equals the margin.
    anchors = np.repeat(np.column_stack([anchors_xy, center[2] + z_rel]), n_pts, axis=0)
    dirs3 = np.tile(np.column_stack([ray, np.zeros(n_pts)]), (n_slices, 1))
    lo = np.zeros(len(anchors))
    hi = np.full(len(anchors), 2.0 * float(tumor.semi_axes.max()) + margin + 5.0)
    for _ in range(52):
        mid = 0.5 * (lo + hi)
        d = tumor.signed_distance(anchors + mid[:, None] * dirs3)
        past = d > margin
        hi = np.where(past, mid, hi)
        lo = np.where(past, lo, mid)
    rho = (0.5 * (lo + hi)).reshape(n_slices, n_pts)

    if cfg.radial_jitter_mm > 0:
        rho = rho + rng.normal(0.0, cfg.radial_jitter_mm, rho.shape)
    rho = np.clip(rho, 0.01, None)

    contours = []
    for k in range(n_slices):
        pts2d = anchors_xy[k] + rho[k][:, None] * ray
        pose = RigidTransform(np.eye(3), np.array([0.0, 0.0, center[2] + z_rel[k]]))
        t_ns = int(k * 1_000_000_000 / 30)  # nominal 30 fps sweep
        contours.append(Contour(pts2d, pose, t_ns))
    return contours


# -- resection experiment ------------------------------------------------------


@dataclass(frozen=True)
class ResectionReport:
    min_margin_mm: Optional[float]
    positive_margin: bool
    transected: bool
    volume_removed_pct: Optional[float]
    duration_s: float
    breach_count: int
    max_breach_depth_mm: float
    sample_count: int
    cut_sample_count: int
    margin_threshold_mm: float = MARGIN_THRESHOLD_MM

    def __post_init__(self) -> None:
        if self.transected and not self.positive_margin:
            raise ValueError("a transected specimen is by definition margin-positive")
        if self.volume_removed_pct is not None and not 0.0 <= self.volume_removed_pct <= 100.0:
            raise ValueError("volume_removed_pct must lie in [0, 100]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def csv_header() -> str:
        return (
            "min_margin_mm,positive_margin,transected,volume_removed_pct,"
            "duration_s,breach_count,max_breach_depth_mm,sample_count,cut_sample_count"
        )

    def as_csv_row(self) -> str:
        def num(x):
            return "" if x is None else repr(float(x))

        return ",".join(
            [
                num(self.min_margin_mm),
                str(int(self.positive_margin)),
                str(int(self.transected)),
                num(self.volume_removed_pct),
                repr(float(self.duration_s)),
                str(self.breach_count),
                repr(float(self.max_breach_depth_mm)),
                str(self.sample_count),
                str(self.cut_sample_count),
            ]
        )


def compute_report(
    trajectory: Trajectory,
    true_tumor: Ellipsoid,
    phantom: PhantomBox,
    margin_threshold_mm: float = MARGIN_THRESHOLD_MM,
) -> ResectionReport:
    """Score a cutting-flagged tip trajectory against the analytic tumor.

    Positions and the ellipsoid must share one frame.  The specimen is
    approximated by the convex hull of the cutting samples; fewer than four
    non-coplanar cut points leave the volume undefined (reported as None).
    """
    if len(trajectory) == 0:
        raise EmptyTrajectory("trajectory holds no samples")

    ordered = sorted((s for s in trajectory.samples if s.valid), key=lambda s: s.t_ns)
    all_pos = np.array([s.pose.translation for s in ordered]).reshape(-1, 3)
    cut = [s for s in ordered if s.cutting]

    sd_all = true_tumor.signed_distance(all_pos) if len(all_pos) else np.empty(0)
    breached = sd_all < 0.0
    entries = int(np.count_nonzero(breached[1:] & ~breached[:-1])) + int(bool(len(breached)) and breached[0])
    max_depth = float(-sd_all.min()) if breached.any() else 0.0

    if not cut:
        return ResectionReport(
            None, False, False, None, 0.0, entries, max_depth, len(ordered), 0, margin_threshold_mm
        )

    cut_pos = np.array([s.pose.translation for s in cut])
    sd_cut = true_tumor.signed_distance(cut_pos)
    min_margin = float(sd_cut.min())
    volume_pct: Optional[float] = None
    try:
        vol = float(_Hull(cut_pos).volume)
        volume_pct = min(100.0, vol / phantom.volume() * 100.0)
    except QhullError:
        pass  # degenerate specimen: volume stays undefined

    return ResectionReport(
        min_margin_mm=min_margin,
        positive_margin=min_margin < margin_threshold_mm,
        transected=min_margin < 0.0,
        volume_removed_pct=volume_pct,
        duration_s=(cut[-1].t_ns - cut[0].t_ns) / 1e9,
        breach_count=entries,
        max_breach_depth_mm=max_depth,
        sample_count=len(ordered),
        cut_sample_count=len(cut),
        margin_threshold_mm=margin_threshold_mm,
    )


def run_resection(
    scenario: Scenario,
    guided: bool,
    record_decimation: int = 10,
    tracker_rate_hz: float = 60.0,
) -> tuple[Trajectory, ResectionReport]:
    """Simulate one resection on a virtual clock; deterministic per (cfg, guided).

    The scripted controller commands tip goals in the displayed tumor frame.
    The measured chain closes exactly (a converged position servo), so tracking
    error does not perturb what the operator sees; it perturbs where the tool
    TRULY is.  Recorded samples are true tip positions in the true tumor frame,
    every tick while cutting and every `record_decimation`-th tick otherwise.
    """
    cfg = scenario.cfg
    # Both arms of a paired run share the same nuisance streams.
    noise = dataclasses.replace(
        cfg.noise,
        seed=int(np.random.SeedSequence([cfg.seed, cfg.noise.seed, 11]).generate_state(1)[0]),
    )
    tip_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, cfg.noise.seed, 13]))

    displayed = inflate(scenario.planned_hull, cfg.vf.margin)
    cp = cfg.controller
    if guided:
        controller = CompliantController(
            displayed,
            n_targets=cp.compliant_targets,
            speed_mm_per_tick=cp.compliant_speed,
            depth_cap_mm=cp.compliant_depth_cap,
            press_force_n=cp.compliant_press_force,
        )
        vf = cfg.vf
    else:
        controller = AggressiveController(
            scenario.planned_hull,
            bias_mm=cp.bias_mm,
            seed=cfg.seed,
            n_targets=cp.aggressive_targets,
            speed_mm_per_tick=cp.aggressive_speed,
        )
        vf = dataclasses.replace(cfg.vf, enabled=False)

    sim = TrackerSimulator(
        {FrameId.NEEDLE_SENSOR: FrameMotion(scenario.anchor_pose, cfg.motion)},
        noise=noise,
        rate_hz=tracker_rate_hz,
    )

    graph = FrameGraph()
    graph.set_edge(FrameId.REFERENCE, FrameId.TRACKER, RigidTransform.identity())
    needle_box: Mailbox[TrackerSample] = Mailbox()
    tip_box: Mailbox[TrackerSample] = Mailbox()
    mesh_box: Mailbox[FixtureMesh] = Mailbox()
    cfg_box: Mailbox[VfConfig] = Mailbox()
    out_box: Mailbox[ProxyState] = Mailbox()
    mesh_box.put(displayed)
    cfg_box.put(vf)

    trajectory = Trajectory()
    stop = threading.Event()
    state = {
        "sample_idx": 0,
        "next_sample_ns": 0,
        "needle_meas": scenario.anchor_pose,
        "eps_tip": np.zeros(3),
        "tick": 0,
    }
    eye = np.eye(3)

    def pre_tick(now_ns: int) -> None:
        while now_ns >= state["next_sample_ns"]:
            s = sim.sample(FrameId.NEEDLE_SENSOR, state["sample_idx"])
            needle_box.put(s, s.timestamp_ns)
            if s.valid:
                state["needle_meas"] = s.pose
            state["eps_tip"] = tip_rng.normal(0.0, noise.pos_sigma, 3)
            state["sample_idx"] += 1
            state["next_sample_ns"] = int(round(state["sample_idx"] * 1e9 / tracker_rate_hz))

        if controller.done:
            stop.set()
            return
        snap = out_box.read()
        goal, cutting = controller.next_goal(now_ns, None if snap is None else snap.value)

        meas_tip = state["needle_meas"].apply(goal)
        tip_box.put(TrackerSample(FrameId.CAUTERY_TIP, RigidTransform(eye, meas_tip), now_ns), now_ns)

        true_tip = meas_tip - state["eps_tip"]
        state["tick"] += 1
        if cutting or state["tick"] % record_decimation == 0:
            local = sim.true_pose(FrameId.NEEDLE_SENSOR, now_ns).inverse().apply(true_tip)
            trajectory.append(
                TrajectorySample(now_ns, FrameId.CAUTERY_TIP, RigidTransform(eye, local), True, cutting)
            )

    run_servo(
        graph,
        {FrameId.NEEDLE_SENSOR: needle_box, FrameId.CAUTERY_TIP: tip_box},
        mesh_box,
        cfg_box,
        out_box,
        VirtualClock(),
        duration_s=cfg.max_duration_s,
        stop=stop,
        pre_tick=pre_tick,
    )

    report = compute_report(trajectory, scenario.tumor.local(), scenario.phantom)
    return trajectory, report


def run_paired(cfg: ScenarioConfig) -> tuple[ResectionReport, ResectionReport]:
    """Guided and unguided resections of the same generated scenario."""
    scenario = generate_scenario(cfg)
    _, guided = run_resection(scenario, guided=True)
    _, unguided = run_resection(scenario, guided=False)
    return guided, unguided
