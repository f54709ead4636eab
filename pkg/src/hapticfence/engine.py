"""Finger-proxy virtual fixture force law.

The forbidden region is the inside of the inflated hull.  The tracked tool
tip is the goal; the proxy is the goal's Euclidean projection onto the hull
surface whenever the goal penetrates, and the rendered force is a clamped
spring pulling the goal back out toward the proxy.  Pure functions over
immutable snapshots; the servo loop owns time and staleness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UnknownFrame  # noqa: F401  (re-raised by graph.resolve)
from .frames import FrameGraph, FrameId
from .geometry import FixtureMesh

FORCE_CAP_N = 3.3
COLLISION_MARGIN_MM = 4.0


def _vec3(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite")
    return v


@dataclass(frozen=True)
class VfConfig:
    stiffness_k: float = 1.0  # N/mm; cap engages at 3.3 mm depth, inside the 4 mm margin
    force_cap: float = FORCE_CAP_N  # N
    margin: float = COLLISION_MARGIN_MM  # mm, hull inflation
    enabled: bool = True

    def __post_init__(self) -> None:
        if not self.stiffness_k > 0:
            raise ValueError("stiffness_k must be > 0")
        if not self.force_cap > 0:
            raise ValueError("force_cap must be > 0")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")


@dataclass(frozen=True)
class ProxyState:
    """One servo tick's contact snapshot, in the tumor frame."""

    proxy: np.ndarray  # mm
    goal: np.ndarray  # mm
    in_contact: bool
    force: np.ndarray  # N
    timestamp_ns: int = 0
    prev_proxy: np.ndarray | None = None  # continuity diagnostics
    stale: bool = False  # tracker input older than the staleness budget

    def __post_init__(self) -> None:
        object.__setattr__(self, "proxy", _vec3(self.proxy, "proxy"))
        object.__setattr__(self, "goal", _vec3(self.goal, "goal"))
        object.__setattr__(self, "force", _vec3(self.force, "force"))
        if not self.in_contact:
            if np.any(self.force != 0.0):
                raise ValueError("free state must carry zero force")
            if not np.array_equal(self.proxy, self.goal):
                raise ValueError("free state must have proxy == goal")

    @classmethod
    def free(cls, goal, timestamp_ns: int = 0, prev_proxy=None, stale: bool = False) -> "ProxyState":
        g = _vec3(goal, "goal")
        return cls(g, g, False, np.zeros(3), timestamp_ns, prev_proxy, stale)

    @property
    def depth_mm(self) -> float:
        return float(np.linalg.norm(self.proxy - self.goal))


def compute_force(proxy, goal, cfg: VfConfig) -> np.ndarray:
    """Proportional resistance ``k * (proxy - goal)``, magnitude-clamped to the
    cap with direction preserved."""
    f = cfg.stiffness_k * (_vec3(proxy, "proxy") - _vec3(goal, "goal"))
    mag = float(np.linalg.norm(f))
    if mag > cfg.force_cap:
        f *= cfg.force_cap / mag
    return f


def step_proxy(
    fixture: FixtureMesh,
    prev: ProxyState | None,
    goal,
    cfg: VfConfig,
    timestamp_ns: int = 0,
) -> ProxyState:
    """Advance the proxy for one tick against an (already inflated) fixture.

    Goal outside the hull: free motion, proxy rides the goal, zero force.
    Goal inside: proxy is the projection onto the surface (single supporting
    face for interior points of a convex hull), force per compute_force.
    """
    g = _vec3(goal, "goal")
    prev_proxy = None if prev is None else prev.proxy
    if not cfg.enabled:
        return ProxyState.free(g, timestamp_ns, prev_proxy)
    slack = fixture.face_normals @ g - fixture.face_offsets
    i = int(np.argmax(slack))
    if slack[i] > 0.0:
        return ProxyState.free(g, timestamp_ns, prev_proxy)
    proxy = g - slack[i] * fixture.face_normals[i]
    force = compute_force(proxy, g, cfg)
    return ProxyState(proxy, g, True, force, timestamp_ns, prev_proxy)


def transform_force_to_base(force, graph: FrameGraph) -> np.ndarray:
    """Re-express a tumor-frame force in the robot base frame.

    Forces are free vectors: rotation only, no translation.
    """
    f = _vec3(force, "force")
    t = graph.resolve(FrameId.TUMOR_MODEL, FrameId.ROBOT_BASE)
    return t.rotation @ f
