"""Rigid-transform algebra, the multi-sensor frame graph, and pivot calibration.

Conventions: column-vector points, pre-multiply composition (``a @ b`` applies
``b`` first), lengths in millimetres, timestamps in integer nanoseconds.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateMotion, UnknownFrame

log = logging.getLogger(__name__)

ORTHONORMALITY_TOL = 1e-9
PIVOT_RANK_TOL = 1e-6
PIVOT_RMS_WARN_MM = 1.5


def _as_readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion: ``p_out = rotation @ p_in + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        r = _as_readonly(self.rotation)
        t = _as_readonly(self.translation)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if t.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got {t.shape}")
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValueError("transform entries must be finite")
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > 1e-7:
            raise ValueError(f"rotation is not orthonormal (|R'R - I| = {err:.3e})")
        if abs(np.linalg.det(r) - 1.0) > 1e-7:
            raise ValueError("rotation must have determinant +1")
        if err > ORTHONORMALITY_TOL:
            # Close enough to be a rotation, but drifted: re-project via SVD.
            u, _, vt = np.linalg.svd(r)
            r = _as_readonly(u @ vt)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def _trusted(cls, rotation: np.ndarray, translation: np.ndarray) -> "RigidTransform":
        # Fast path for algebra on already-validated transforms (compose,
        # inverse, graph walks): products of rotations stay orthonormal to
        # ~1e-15 per op and chains here are a few hops, so revalidating every
        # intermediate would only burn the servo budget.  All boundary
        # construction (wire decode, tracker intake, user input) goes through
        # __init__ and keeps the full checks.
        rotation.setflags(write=False)
        translation.setflags(write=False)
        obj = object.__new__(cls)
        object.__setattr__(obj, "rotation", rotation)
        object.__setattr__(obj, "translation", translation)
        return obj

    @classmethod
    def identity(cls) -> "RigidTransform":
        return _IDENTITY

    @classmethod
    def from_rotvec(cls, rotvec: Sequence[float], translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "RigidTransform":
        """Axis-angle (radians, vector magnitude = angle) plus translation."""
        v = np.asarray(rotvec, dtype=np.float64)
        angle = float(np.linalg.norm(v))
        if angle < 1e-300:
            return cls(np.eye(3), np.asarray(translation, dtype=np.float64))
        k = v / angle
        kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        r = np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)
        return cls(r, np.asarray(translation, dtype=np.float64))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map one (3,) point or an (N, 3) batch into the target frame."""
        p = np.asarray(points, dtype=np.float64)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = np.ascontiguousarray(self.rotation.T)
        return RigidTransform._trusted(rt, -(rt @ self.translation))

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def almost_equal(self, other: "RigidTransform", pos_tol: float = 1e-9, rot_tol: float = 1e-12) -> bool:
        return (
            np.abs(self.rotation - other.rotation).max() <= rot_tol
            and np.abs(self.translation - other.translation).max() <= pos_tol
        )


_IDENTITY_R = np.eye(3)
_IDENTITY_R.setflags(write=False)
_IDENTITY_T = np.zeros(3)
_IDENTITY_T.setflags(write=False)
_IDENTITY = RigidTransform(_IDENTITY_R, _IDENTITY_T)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` first, then ``a`` (column-vector convention)."""
    return RigidTransform._trusted(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


class FrameId(str, Enum):
    REFERENCE = "Reference"
    TRACKER = "Tracker"
    STYLUS_SENSOR = "StylusSensor"
    CAUTERY_TIP = "CauteryTip"
    NEEDLE_SENSOR = "NeedleSensor"
    TUMOR_MODEL = "TumorModel"
    IMAGE = "Image"
    ROBOT_BASE = "RobotBase"

    def __str__(self) -> str:  # CSV / wire label
        return self.value


@dataclass(frozen=True)
class FrameEdge:
    parent: FrameId
    child: FrameId
    transform: RigidTransform  # child -> parent (pose of child in parent)
    timestamp_ns: int


class FrameGraph:
    """Tree of frames rooted at Reference, one latest edge per child.

    Single-writer, snapshot-read: mutation is serialized by an internal lock;
    ``snapshot()`` hands readers a consistent private copy.
    """

    def __init__(self, root: FrameId = FrameId.REFERENCE):
        self.root = root
        self._edges: dict[FrameId, FrameEdge] = {}
        self._lock = threading.Lock()

    def set_edge(
        self,
        parent: FrameId,
        child: FrameId,
        transform: RigidTransform,
        timestamp_ns: int = 0,
    ) -> None:
        """Insert or refresh the child -> parent edge (transform maps child-frame
        points into the parent frame)."""
        if child == self.root:
            raise ValueError(f"cannot re-parent the root frame {self.root}")
        with self._lock:
            if parent != self.root and parent not in self._edges:
                raise UnknownFrame(f"parent frame {parent} not in graph")
            # Re-parenting must not create a cycle: walk up from the new parent.
            cursor = parent
            while cursor != self.root:
                if cursor == child:
                    raise ValueError(f"edge {parent}->{child} would create a cycle")
                cursor = self._edges[cursor].parent
            self._edges[child] = FrameEdge(parent, child, transform, timestamp_ns)

    def frames(self) -> set[FrameId]:
        with self._lock:
            return {self.root, *self._edges.keys()}

    def edge(self, child: FrameId) -> FrameEdge:
        with self._lock:
            if child not in self._edges:
                raise UnknownFrame(f"no edge stored for frame {child}")
            return self._edges[child]

    def snapshot(self) -> "FrameGraph":
        g = FrameGraph(self.root)
        with self._lock:
            g._edges = dict(self._edges)
        return g

    def _to_root(self, frame: FrameId) -> tuple[np.ndarray, np.ndarray]:
        """Rotation/translation mapping `frame` points into the root frame."""
        r, t = None, None
        cursor = frame
        while cursor != self.root:
            edge = self._edges.get(cursor)
            if edge is None:
                raise UnknownFrame(f"frame {cursor} not reachable from {self.root}")
            er, et = edge.transform.rotation, edge.transform.translation
            if r is None:
                r, t = er, et
            else:
                r, t = er @ r, er @ t + et
            cursor = edge.parent
        if r is None:
            return _IDENTITY_R, _IDENTITY_T
        return r, t

    def resolve(self, src: FrameId, dst: FrameId) -> RigidTransform:
        """Transform mapping points expressed in ``src`` into ``dst``."""
        with self._lock:
            if src == dst:
                if src != self.root and src not in self._edges:
                    raise UnknownFrame(f"frame {src} not in graph")
                return _IDENTITY
            rd, td = self._to_root(dst)
            rs, ts = self._to_root(src)
            r = rd.T @ rs
            return RigidTransform._trusted(r, rd.T @ (ts - td))


@dataclass(frozen=True)
class PivotResult:
    tip_offset: np.ndarray  # tool tip in the sensor frame (mm)
    pivot_point: np.ndarray  # fixed pivot in the tracker frame (mm)
    rms_residual: float  # mm

    def __post_init__(self) -> None:
        object.__setattr__(self, "tip_offset", _as_readonly(self.tip_offset))
        object.__setattr__(self, "pivot_point", _as_readonly(self.pivot_point))


def pivot_calibrate(samples: Iterable[RigidTransform], min_samples: int = 10) -> PivotResult:
    """Recover a tracked tool's tip offset by pivoting about a fixed point.

    Each sample is the sensor -> tracker pose ``(R_i, p_i)`` while the tip rests
    on the pivot, so ``R_i @ tip + p_i = pivot`` for all i.  Stacking gives one
    linear system in the six unknowns (tip, pivot), solved in a single SVD
    least-squares pass; no initial guess is needed.
    """
    poses = list(samples)
    n = len(poses)
    if n < max(min_samples, 3):
        raise DegenerateMotion(f"need at least {max(min_samples, 3)} samples, got {n}")

    a = np.zeros((3 * n, 6))
    b = np.zeros(3 * n)
    for i, pose in enumerate(poses):
        a[3 * i : 3 * i + 3, 0:3] = pose.rotation
        a[3 * i : 3 * i + 3, 3:6] = -np.eye(3)
        b[3 * i : 3 * i + 3] = -pose.translation

    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s[-1] <= PIVOT_RANK_TOL:
        raise DegenerateMotion(
            f"rotations too similar: smallest singular value {s[-1]:.3e} <= {PIVOT_RANK_TOL:g}"
        )
    x = vt.T @ ((u.T @ b) / s)
    tip, pivot = x[:3], x[3:]

    residuals = np.array([pose.rotation @ tip + pose.translation - pivot for pose in poses])
    # RMS over the stacked scalar equations (per-axis), so isotropic noise of
    # sigma mm/axis yields a residual near sigma.
    rms = float(np.sqrt(np.mean(residuals**2)))
    if rms > PIVOT_RMS_WARN_MM:
        log.warning("pivot calibration rms residual %.2f mm exceeds %.1f mm", rms, PIVOT_RMS_WARN_MM)
    return PivotResult(tip_offset=tip, pivot_point=pivot, rms_residual=rms)
