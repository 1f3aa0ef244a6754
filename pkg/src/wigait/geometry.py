"""Alpha-shape surfaces of body-part point clouds.

The sub-surfaces used for wave simulation are the boundary triangles of the
3D alpha-complex of each part. A triangle belongs to the complex when it
bounds a Delaunay tetrahedron whose circumradius is below ``alpha``, or when
its own smallest circumsphere is empty and has radius below ``alpha``. The
second case keeps sheets of surface-sampled points (skin meshes) whose
enclosing tetrahedra are too large to survive the filter.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.spatial import Delaunay, QhullError
from scipy.spatial.distance import pdist

from .kinematics import PART_IDS, BodyFrame, MeshSequence, is_degenerate

_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])  # face i is opposite vertex i

DEFAULT_RADII = {
    "torso": 0.25,
    "head": 0.15,
    "left_shoulder": 0.15,
    "right_shoulder": 0.15,
    "left_upper_arm": 0.15,
    "right_upper_arm": 0.15,
    "left_thigh": 0.15,
    "right_thigh": 0.15,
    "left_leg": 0.15,
    "right_leg": 0.15,
    "left_hand": 0.08,
    "right_hand": 0.08,
    "left_foot": 0.08,
    "right_foot": 0.08,
}


class DegenerateInputError(ValueError):
    pass


class EmptyBodyError(ValueError):
    pass


@dataclass(frozen=True)
class AlphaConfig:
    radii: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_RADII))

    def __post_init__(self):
        radii = dict(DEFAULT_RADII)
        radii.update(self.radii)
        bad = {k: v for k, v in radii.items() if not v > 0}
        if bad:
            raise ValueError(f"alpha radii must be positive: {bad}")
        object.__setattr__(self, "radii", radii)

    def radius(self, part: str) -> float:
        return self.radii[part]


@dataclass(frozen=True)
class SubSurface:
    center: np.ndarray
    normal: np.ndarray
    area: float
    part_id: str


@dataclass(frozen=True)
class TriangulatedBody:
    """Triangles of one frame stored as parallel arrays.

    ``vertices`` indexes into the points of the owning part and is ordered
    so that the right-hand normal points away from the part centroid.
    """

    timestamp: float
    part_ids: tuple[str, ...]
    part_index: np.ndarray
    vertices: np.ndarray
    centers: np.ndarray
    normals: np.ndarray
    areas: np.ndarray
    skipped: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.areas)

    @property
    def surfaces(self) -> list[SubSurface]:
        return [
            SubSurface(self.centers[i], self.normals[i], float(self.areas[i]), self.part_ids[self.part_index[i]])
            for i in range(len(self))
        ]

    def part_area(self, part: str) -> float:
        if part not in self.part_ids:
            return 0.0
        return float(self.areas[self.part_index == self.part_ids.index(part)].sum())

    def subset(self, mask: np.ndarray) -> "TriangulatedBody":
        return TriangulatedBody(
            self.timestamp, self.part_ids, self.part_index[mask], self.vertices[mask],
            self.centers[mask], self.normals[mask], self.areas[mask], self.skipped,
        )

    def __eq__(self, other):
        if not isinstance(other, TriangulatedBody):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and self.part_ids == other.part_ids
            and self.skipped == other.skipped
            and all(
                np.array_equal(getattr(self, n), getattr(other, n))
                for n in ("part_index", "vertices", "centers", "normals", "areas")
            )
        )

    __hash__ = None


def empty_body(timestamp: float = 0.0) -> TriangulatedBody:
    z3 = np.zeros((0, 3))
    return TriangulatedBody(timestamp, (), np.zeros(0, int), np.zeros((0, 3), int), z3, z3, np.zeros(0))


def tet_circumradius(tets: np.ndarray) -> np.ndarray:
    """Circumradius of tetrahedra given as (T, 4, 3); infinite for flat ones."""
    a = tets[:, 0]
    u, v, w = tets[:, 1] - a, tets[:, 2] - a, tets[:, 3] - a
    vw, wu, uv = np.cross(v, w), np.cross(w, u), np.cross(u, v)
    det = np.einsum("ij,ij->i", u, vw)
    num = (
        np.einsum("ij,ij->i", u, u)[:, None] * vw
        + np.einsum("ij,ij->i", v, v)[:, None] * wu
        + np.einsum("ij,ij->i", w, w)[:, None] * uv
    )
    scale = np.maximum.reduce([np.linalg.norm(x, axis=1) for x in (u, v, w)])
    flat = np.abs(det) <= 1e-10 * scale**3
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.linalg.norm(num, axis=1) / (2 * np.abs(det))
    r[flat] = np.inf
    return r


def triangle_circumsphere(tris: np.ndarray):
    """Center and radius of the smallest sphere through each triangle's vertices."""
    a = tris[:, 0]
    u, v = tris[:, 1] - a, tris[:, 2] - a
    n = np.cross(u, v)
    nn = np.einsum("ij,ij->i", n, n)
    with np.errstate(divide="ignore", invalid="ignore"):
        off = (
            np.einsum("ij,ij->i", u, u)[:, None] * np.cross(v, n)
            + np.einsum("ij,ij->i", v, v)[:, None] * np.cross(n, u)
        ) / (2 * nn[:, None])
    r = np.linalg.norm(off, axis=1)
    r[nn == 0] = np.inf
    return a + off, r


def _check_points(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3:
        raise DegenerateInputError(f"expected (n, 3) points, got shape {points.shape}")
    if len(points) < 4:
        raise DegenerateInputError(f"need at least 4 points, got {len(points)}")
    if len(np.unique(points, axis=0)) != len(points):
        raise DegenerateInputError("duplicate points")
    if is_degenerate(points):
        raise DegenerateInputError("points are coplanar")
    return points


def alpha_complex(points: np.ndarray, alpha: float):
    """Boundary triangles of the alpha-complex plus the retained-tetrahedron count.

    Returns ``(triangles, n_tets)`` where ``triangles`` is an (M, 3) array of
    point indices (sorted within each row, rows in lexicographic order).
    """
    points = _check_points(points)
    try:
        tri = Delaunay(points)
    except QhullError as exc:
        raise DegenerateInputError(f"Delaunay triangulation failed: {exc}") from None
    simplices = tri.simplices
    keep = tet_circumradius(points[simplices]) < alpha

    faces = np.sort(simplices[:, _FACES].reshape(-1, 3), axis=1)
    uniq, inv = np.unique(faces, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    n_keep = np.bincount(inv, weights=np.repeat(keep, 4).astype(float), minlength=len(uniq))

    center, radius = triangle_circumsphere(points[uniq])
    opposite = points[simplices.reshape(-1)]
    d2 = np.einsum("ij,ij->i", opposite - center[inv], opposite - center[inv])
    # points on the sphere count as inside so cocircular faces stay attached
    encroached = d2 <= (radius[inv] ** 2) * (1 + 1e-9)
    attached = np.zeros(len(uniq), dtype=bool)
    np.logical_or.at(attached, inv, encroached)

    in_complex = (n_keep > 0) | ((radius < alpha) & ~attached)
    boundary = in_complex & (n_keep < 2)
    return uniq[boundary], int(keep.sum())


def alpha_shape(points: np.ndarray, alpha: float) -> np.ndarray:
    """Boundary triangles of the alpha-shape as an (M, 3) array of point indices."""
    return alpha_complex(points, alpha)[0]


def _oriented_geometry(points: np.ndarray, tris: np.ndarray):
    """Orient triangles away from the point centroid; drop zero-area ones."""
    centroid = points.mean(axis=0)
    a, b, c = points[tris[:, 0]], points[tris[:, 1]], points[tris[:, 2]]
    cross = cross3(b - a, c - a)
    centers = (a + b + c) / 3.0
    flip = np.einsum("ij,ij->i", cross, centers - centroid) < 0
    tris = tris.copy()
    tris[flip, 1], tris[flip, 2] = tris[flip, 2], tris[flip, 1].copy()
    cross[flip] *= -1
    norm = np.linalg.norm(cross, axis=1)
    ok = norm > 0
    tris, cross, norm, centers = tris[ok], cross[ok], norm[ok], centers[ok]
    return tris, centers, cross / norm[:, None], 0.5 * norm


def cross3(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-wise cross product of (n, 3) arrays (``np.cross`` is slow for small inputs)."""
    out = np.empty(np.broadcast_shapes(u.shape, v.shape))
    out[..., 0] = u[..., 1] * v[..., 2] - u[..., 2] * v[..., 1]
    out[..., 1] = u[..., 2] * v[..., 0] - u[..., 0] * v[..., 2]
    out[..., 2] = u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]
    return out


def triangle_geometry(points: np.ndarray, tris: np.ndarray):
    """Centers, unit normals and areas of oriented triangles."""
    return corner_geometry(points[tris[:, 0]], points[tris[:, 1]], points[tris[:, 2]])


def corner_geometry(a: np.ndarray, b: np.ndarray, c: np.ndarray):
    cross = cross3(b - a, c - a)
    norm = np.sqrt(np.einsum("ij,ij->i", cross, cross))
    with np.errstate(invalid="ignore", divide="ignore"):
        normals = cross / norm[:, None]
    return (a + b + c) / 3.0, normals, 0.5 * norm


class BodyTriangulator:
    """Per-part alpha shapes with topology reuse across rigidly moving frames.

    Alpha-shapes are invariant under rigid motion, so when a part's pairwise
    point distances match the frame the topology was computed on to within
    ``rigid_tol`` (relative to the part's diameter) the triangle list is
    reused and only the geometry is recomputed. The default tolerance
    absorbs the slight shrinking that linear interpolation of rotating
    parts introduces when a sequence is resampled.
    """

    def __init__(self, cfg: AlphaConfig | None = None, rigid_tol: float = 1e-3):
        self.cfg = cfg or AlphaConfig()
        self.rigid_tol = rigid_tol
        self._cache: dict[str, tuple[np.ndarray, np.ndarray | None]] = {}

    def _part_triangles(self, part: str, points: np.ndarray) -> np.ndarray | None:
        if len(points) < 4:
            return None
        dist = pdist(points)
        cached = self._cache.get(part)
        if cached is not None and cached[0].shape == dist.shape:
            if np.max(np.abs(cached[0] - dist)) <= self.rigid_tol * float(dist.max()):
                return cached[1]
        try:
            tris = alpha_shape(points, self.cfg.radius(part))
            tris = _oriented_geometry(points, tris)[0]
        except DegenerateInputError:
            tris = None
        self._cache[part] = (dist, tris)
        return tris

    def __call__(self, frame: BodyFrame) -> TriangulatedBody:
        part_ids, idx, verts, corners, skipped = [], [], [], [], []
        for part in PART_IDS:
            pts = frame.parts.get(part)
            tris = None if pts is None else self._part_triangles(part, pts)
            if tris is None or len(tris) == 0:
                skipped.append(part)
                continue
            part_ids.append(part)
            idx.append(np.full(len(tris), len(part_ids) - 1))
            verts.append(tris)
            corners.append(pts[tris])
        if not part_ids:
            raise EmptyBodyError(f"all parts degenerate at t={frame.timestamp}")
        corners = np.concatenate(corners)
        centers, normals, areas = corner_geometry(corners[:, 0], corners[:, 1], corners[:, 2])
        return TriangulatedBody(
            frame.timestamp,
            tuple(part_ids),
            np.concatenate(idx),
            np.concatenate(verts),
            centers,
            normals,
            areas,
            tuple(skipped),
        )


def triangulate_body(frame: BodyFrame, cfg: AlphaConfig | None = None) -> TriangulatedBody:
    """Alpha-shape every non-degenerate part; degenerate parts are listed in ``skipped``."""
    return BodyTriangulator(cfg)(frame)


def triangulate_sequence(seq: MeshSequence, cfg: AlphaConfig | None = None) -> list[TriangulatedBody]:
    tri = BodyTriangulator(cfg)
    return [tri(f) for f in seq.frames]


def skipped_report(bodies) -> dict[str, int]:
    """Number of frames in which each part was skipped."""
    report: dict[str, int] = {}
    for body in bodies:
        for part in body.skipped:
            report[part] = report.get(part, 0) + 1
    return report


def write_ascii_stl(body: TriangulatedBody, frame: BodyFrame, path: str | Path, name: str = "body") -> Path:
    """Dump a triangulated frame as an ASCII STL file for inspection."""
    lines = [f"solid {name}"]
    for i in range(len(body)):
        pts = frame.parts[body.part_ids[body.part_index[i]]][body.vertices[i]]
        n = body.normals[i]
        lines.append(f"  facet normal {n[0]:.9e} {n[1]:.9e} {n[2]:.9e}")
        lines.append("    outer loop")
        for p in pts:
            lines.append(f"      vertex {p[0]:.9e} {p[1]:.9e} {p[2]:.9e}")
        lines.append("    endloop")
        lines.append("  endfacet")
    lines.append(f"endsolid {name}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path
