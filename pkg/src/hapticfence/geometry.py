"""Forbidden-region fixture geometry.

Pipeline: 2D slice contours -> 3D point cloud in the tumor frame -> convex
hull -> margin-inflated hull, plus the distance / projection queries the
haptic engine and metrics run against.  All queries treat the hull as the
intersection of its face halfspaces ``n . x <= d``; faces are stored in a
deterministic order (normals sorted lexicographically) so tie-breaks at
edges and vertices are reproducible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import ConvexHull, HalfspaceIntersection, QhullError

from .errors import DegenerateInput, EmptyStack
from .frames import FrameGraph, FrameId, RigidTransform

CONTAINMENT_TOL = 1e-6
COPLANARITY_EIGENVALUE_TOL = 1e-9  # mm^2


def _readonly(a: np.ndarray, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


# -- contours -----------------------------------------------------------------


def _polygon_is_simple(pts: np.ndarray) -> bool:
    """True when no two non-adjacent edges properly cross."""

    def orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])

    m = len(pts)
    for i in range(m):
        a, b = pts[i], pts[(i + 1) % m]
        for j in range(i + 1, m):
            if j == i or (j + 1) % m == i or (i + 1) % m == j:
                continue  # shared endpoint
            c, d = pts[j], pts[(j + 1) % m]
            o1, o2 = orient(a, b, c), orient(a, b, d)
            o3, o4 = orient(c, d, a), orient(c, d, b)
            if o1 * o2 < 0 and o3 * o4 < 0:
                return False
    return True


@dataclass(frozen=True)
class Contour:
    """One 2D slice annotation with the image pose at capture time.

    ``points`` are in-plane millimetres; ``image_pose`` maps image-frame
    points (x, y, 0) into the Reference frame.
    """

    points: np.ndarray  # (M, 2)
    image_pose: RigidTransform
    timestamp_ns: int = 0

    def __post_init__(self) -> None:
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 3:
            raise ValueError(f"contour needs >= 3 2D points, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("contour points must be finite")
        if not _polygon_is_simple(p):
            raise ValueError("contour polygon self-intersects")
        object.__setattr__(self, "points", _readonly(p))

    def lifted(self) -> np.ndarray:
        """Contour points as 3D points in the Reference frame."""
        p3 = np.column_stack([self.points, np.zeros(len(self.points))])
        return self.image_pose.apply(p3)


@dataclass(frozen=True)
class ContourStack:
    contours: tuple[Contour, ...]
    tumor_frame: FrameId = FrameId.NEEDLE_SENSOR

    def __post_init__(self) -> None:
        object.__setattr__(self, "contours", tuple(self.contours))

    def __len__(self) -> int:
        return len(self.contours)


def contours_to_points(stack: ContourStack, graph: FrameGraph) -> np.ndarray:
    """Lift every contour to 3D and express the cloud in the tumor frame.

    Uses each contour's captured image pose for the Image -> Reference leg and
    the graph for Reference -> tumor; pass a graph snapshot taken at capture
    time if the tumor has moved since.
    """
    if len(stack) == 0:
        raise EmptyStack("contour stack holds no contours")
    to_tumor = graph.resolve(FrameId.REFERENCE, stack.tumor_frame)
    clouds = [to_tumor.apply(c.lifted()) for c in stack.contours]
    return np.vstack(clouds)


# -- fixture mesh -------------------------------------------------------------


@dataclass(frozen=True)
class FixtureMesh:
    """Convex, watertight triangle mesh with per-face outward planes.

    Faces are sorted lexicographically by outward normal (then offset) so any
    "lowest face index" tie-break is deterministic.
    """

    vertices: np.ndarray  # (V, 3) mm
    triangles: np.ndarray  # (F, 3) vertex indices
    face_normals: np.ndarray  # (F, 3) outward unit normals
    face_offsets: np.ndarray  # (F,) plane offsets: n . x <= d

    def __post_init__(self) -> None:
        v = _readonly(self.vertices)
        t = _readonly(self.triangles, dtype=np.int64)
        n = _readonly(self.face_normals)
        d = _readonly(self.face_offsets)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) < 4:
            raise DegenerateInput(f"mesh needs >= 4 vertices, got shape {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3 or len(t) < 4:
            raise DegenerateInput("mesh needs >= 4 triangles")
        if n.shape != (len(t), 3) or d.shape != (len(t),):
            raise ValueError("face planes must align with triangles")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "face_normals", n)
        object.__setattr__(self, "face_offsets", d)
        self._validate()

    def _validate(self) -> None:
        v, t, n, d = self.vertices, self.triangles, self.face_normals, self.face_offsets
        if t.min() < 0 or t.max() >= len(v):
            raise ValueError("triangle index out of range")
        norms = np.linalg.norm(n, axis=1)
        if np.abs(norms - 1.0).max() > 1e-7:
            raise ValueError("face normals must be unit length")
        # Convexity / watertightness: every vertex inside every face halfspace.
        slack = v @ n.T - d  # (V, F)
        if slack.max() > CONTAINMENT_TOL:
            raise ValueError(f"mesh is not convex: vertex protrudes {slack.max():.3e} mm")
        # Outward normals: centroid strictly interior.
        c = v.mean(axis=0)
        if (n @ c - d).max() >= 0:
            raise ValueError("centroid not strictly inside; normals not outward")
        # Closed 2-manifold: V - E + F = 2 and each edge shared by exactly 2 faces.
        edges = np.sort(np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1).reshape(-1, 2), axis=1)
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        if not np.all(counts == 2):
            raise ValueError("mesh is not watertight: edge not shared by exactly 2 triangles")
        if len(v) - len(uniq) + len(t) != 2:
            raise ValueError("Euler characteristic V - E + F != 2")

    # convenience ---------------------------------------------------------

    @property
    def num_faces(self) -> int:
        return len(self.triangles)

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def volume(self) -> float:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def corners(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def plane_slack(self, points: np.ndarray) -> np.ndarray:
        """Per-face signed plane distances ``n . p - d`` (positive = outside)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.face_normals.T - self.face_offsets


def convex_hull(points: np.ndarray) -> FixtureMesh:
    """Minimal convex polytope containing the cloud, as a validated FixtureMesh."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DegenerateInput(f"expected (N, 3) points, got shape {pts.shape}")
    if len(pts) < 4:
        raise DegenerateInput(f"need >= 4 points for a 3D hull, got {len(pts)}")
    if not np.all(np.isfinite(pts)):
        raise DegenerateInput("points must be finite")
    centered = pts - pts.mean(axis=0)
    eigs = np.linalg.eigvalsh(centered.T @ centered / len(pts))
    if eigs[0] <= COPLANARITY_EIGENVALUE_TOL:
        raise DegenerateInput(
            f"point cloud is (near-)coplanar: smallest covariance eigenvalue {eigs[0]:.3e} mm^2"
        )
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:
        raise DegenerateInput(f"hull construction failed: {exc}") from exc

    remap = np.full(len(pts), -1, dtype=np.int64)
    remap[hull.vertices] = np.arange(len(hull.vertices))
    verts = pts[hull.vertices]
    tris = remap[hull.simplices]
    normals = hull.equations[:, :3].copy()
    offsets = -hull.equations[:, 3].copy()

    # qhull does not orient simplex vertex order; flip to match outward normals.
    a, b, c = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), normals) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]

    order = np.lexsort((offsets, normals[:, 2], normals[:, 1], normals[:, 0]))
    return FixtureMesh(verts, tris[order], normals[order], offsets[order])


def inflate(mesh: FixtureMesh, margin: float) -> FixtureMesh:
    """Offset every face plane outward by ``margin`` mm and re-extract the hull.

    The result is the intersection of the offset halfspaces: a conservative
    superset of the exact rounded offset (flat near faces, beveled rather than
    rounded at edges and vertices), and it contains the Minkowski sum of the
    mesh with a margin-radius ball.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    if margin == 0.0:
        return mesh
    planes = np.column_stack([mesh.face_normals, mesh.face_offsets])
    planes = np.unique(planes.round(decimals=9), axis=0)
    halfspaces = np.column_stack([planes[:, :3], -(planes[:, 3] + margin)])
    interior = mesh.centroid
    hs = HalfspaceIntersection(halfspaces, interior)
    return convex_hull(hs.intersections)


# -- queries ------------------------------------------------------------------


def _closest_on_triangles(a, b, c, p):
    """Closest point to ``p`` on each triangle (Ericson's region test, vectorized).

    a, b, c: (..., 3) triangle vertices; p broadcastable to (..., 3).
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("...i,...i->...", ab, ap)
    d2 = np.einsum("...i,...i->...", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i->...", ab, bp)
    d4 = np.einsum("...i,...i->...", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i->...", ab, cp)
    d6 = np.einsum("...i,...i->...", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom

    def pick(cond, val, out):
        m = cond & ~decided
        out[m] = val[m]
        decided[...] |= cond
        return out

    cand_interior = a + ab * v_in[..., None] + ac * w_in[..., None]
    out = np.where(np.isfinite(cand_interior), cand_interior, a).copy()
    decided = np.zeros(d1.shape, dtype=bool)
    # Vertex regions, then edge regions; first match wins.
    pick((d1 <= 0) & (d2 <= 0), np.broadcast_to(a, out.shape), out)
    pick((d3 >= 0) & (d4 <= d3), np.broadcast_to(b, out.shape), out)
    pick((d6 >= 0) & (d5 <= d6), np.broadcast_to(c, out.shape), out)
    pick((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab * np.nan_to_num(t_ab)[..., None], out)
    pick((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac * np.nan_to_num(t_ac)[..., None], out)
    pick((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + (c - b) * np.nan_to_num(t_bc)[..., None], out)
    return out


def _triangle_corners(mesh: FixtureMesh):
    v, t = mesh.vertices, mesh.triangles
    return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]


def signed_distance(mesh: FixtureMesh, p: np.ndarray) -> float:
    """Negative inside (distance to nearest face plane), positive outside
    (Euclidean distance to the surface)."""
    return float(signed_distance_batch(mesh, np.asarray(p, dtype=np.float64)[None, :])[0])


def signed_distance_batch(mesh: FixtureMesh, points: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Vectorized signed distances for an (N, 3) batch."""
    pts = np.asarray(points, dtype=np.float64)
    slack = mesh.plane_slack(pts)  # (N, F)
    out = slack.max(axis=1)  # exact for interior points on a convex polytope
    outside = out > 0
    if np.any(outside):
        a, b, c = _triangle_corners(mesh)
        idx = np.flatnonzero(outside)
        for start in range(0, len(idx), chunk):
            sel = idx[start : start + chunk]
            p = pts[sel][:, None, :]  # (n, 1, 3)
            cp = _closest_on_triangles(a[None], b[None], c[None], p)  # (n, F, 3)
            d2 = np.sum((cp - p) ** 2, axis=2)
            out[sel] = np.sqrt(d2.min(axis=1))
    return out


def closest_surface_point(mesh: FixtureMesh, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean projection of ``p`` onto the hull surface and the outward
    normal of the supporting face (ties -> lowest face index)."""
    pt = np.asarray(p, dtype=np.float64)
    slack = mesh.face_normals @ pt - mesh.face_offsets
    i = int(np.argmax(slack))
    if slack[i] <= 0.0:
        # Interior: the nearest-plane foot lies on that face for convex hulls.
        foot = pt - slack[i] * mesh.face_normals[i]
        return foot, mesh.face_normals[i].copy()
    a, b, c = _triangle_corners(mesh)
    cp = _closest_on_triangles(a, b, c, pt[None, :])
    d2 = np.sum((cp - pt) ** 2, axis=1)
    j = int(np.argmin(d2))
    return cp[j], mesh.face_normals[j].copy()


def project_inside_goal(mesh: FixtureMesh, p: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Fast path for interior points: (surface foot, outward normal, depth >= 0).

    Exact for convex polytopes: the boundary distance of an interior point is
    its smallest plane distance and the perpendicular foot lies on that face.
    """
    pt = np.asarray(p, dtype=np.float64)
    slack = mesh.face_normals @ pt - mesh.face_offsets
    i = int(np.argmax(slack))
    depth = -slack[i]
    foot = pt - slack[i] * mesh.face_normals[i]
    return foot, mesh.face_normals[i], float(depth)


def ray_exit(mesh: FixtureMesh, origin: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Distance from an interior origin to the surface along unit directions.

    ``directions`` may be (3,) or (N, 3); returns scalar distances of the same
    leading shape.
    """
    o = np.asarray(origin, dtype=np.float64)
    u = np.asarray(directions, dtype=np.float64)
    single = u.ndim == 1
    u = np.atleast_2d(u)
    if mesh.plane_slack(o[None, :]).max() >= 0:
        raise ValueError("ray_exit origin must be strictly inside the mesh")
    num = mesh.face_offsets - mesh.face_normals @ o  # (F,) all > 0
    den = u @ mesh.face_normals.T  # (N, F)
    with np.errstate(divide="ignore"):
        t = np.where(den > 1e-12, num[None, :] / den, np.inf)
    hit = t.min(axis=1)
    return hit[0] if single else hit


def sample_surface(mesh: FixtureMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform-by-area random points on the hull surface."""
    a, b, c = _triangle_corners(mesh)
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    faces = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    w0, w1, w2 = 1 - s, s * (1 - r2), s * r2
    return w0[:, None] * a[faces] + w1[:, None] * b[faces] + w2[:, None] * c[faces]


# -- binary block (file export; same field layout as the MESH wire body) ------


def mesh_to_bytes(mesh: FixtureMesh) -> bytes:
    """Little-endian block: u32 nverts, u32 ntris, vertices 3xf64, triangles 3xu32."""
    head = struct.pack("<II", len(mesh.vertices), len(mesh.triangles))
    v = mesh.vertices.astype("<f8").tobytes()
    t = mesh.triangles.astype("<u4").tobytes()
    return head + v + t


def mesh_from_bytes(data: bytes) -> FixtureMesh:
    if len(data) < 8:
        raise ValueError("mesh block truncated: missing counts")
    nv, nt = struct.unpack_from("<II", data, 0)
    need = 8 + nv * 24 + nt * 12
    if len(data) != need:
        raise ValueError(f"mesh block length {len(data)} != expected {need}")
    verts = np.frombuffer(data, dtype="<f8", count=nv * 3, offset=8).reshape(nv, 3)
    tris = np.frombuffer(data, dtype="<u4", count=nt * 3, offset=8 + nv * 24).reshape(nt, 3).astype(np.int64)
    # Planes are not serialized; triangles are oriented outward, so recover
    # each face plane from its own corners.  Preserves vertex/triangle order.
    a, b, c = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n, axis=1)
    if np.any(norm < 1e-12):
        raise ValueError("mesh block holds a degenerate triangle")
    n /= norm[:, None]
    d = np.einsum("ij,ij->i", n, a)
    return FixtureMesh(verts, tris, n, d)
