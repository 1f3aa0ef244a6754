import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from conftest import static_frame
from oracles import cuboid_area, sphere_points
from wigait.geometry import (
    DEFAULT_RADII,
    AlphaConfig,
    BodyTriangulator,
    DegenerateInputError,
    EmptyBodyError,
    alpha_complex,
    alpha_shape,
    skipped_report,
    triangulate_body,
    triangulate_sequence,
    write_ascii_stl,
)
from wigait.kinematics import PART_IDS, BodyFrame
from wigait.walker import SyntheticGaitParams, synthesize_walker

TETRA = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
EDGE = 2 * math.sqrt(2)


def _area(points, tris):
    a, b, c = (points[tris[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum()


def _only(part, pts):
    parts = {p: np.zeros((0, 3)) for p in PART_IDS}
    parts[part] = pts
    return BodyFrame(0.0, parts)


def test_tetrahedron_large_alpha_is_hull():
    tris = alpha_shape(TETRA, 10 * EDGE)
    assert len(tris) == 4
    assert {tuple(t) for t in tris} == {(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)}


def test_tetrahedron_small_alpha_is_empty():
    assert len(alpha_shape(TETRA, 1e-6)) == 0


def test_sphere_area_within_five_percent():
    pts = sphere_points(500, seed=0)
    tris = alpha_shape(pts, 0.5)
    assert _area(pts, tris) == pytest.approx(4 * math.pi, rel=0.05)


@pytest.mark.parametrize("seed", range(5))
def test_sphere_area_other_seeds(seed):
    pts = sphere_points(500, seed=100 + seed)
    assert _area(pts, alpha_shape(pts, 0.5)) == pytest.approx(4 * math.pi, rel=0.05)


def test_degenerate_inputs():
    with pytest.raises(DegenerateInputError, match="coplanar"):
        alpha_shape(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [2, 3, 0]], float), 1.0)
    with pytest.raises(DegenerateInputError, match="duplicate"):
        alpha_shape(np.vstack([TETRA, TETRA[:1]]), 1.0)
    with pytest.raises(DegenerateInputError):
        alpha_shape(TETRA[:3], 1.0)


def test_cuboid_torso_twelve_triangles():
    a, b, c = 0.3, 0.2, 0.15
    corners = np.array([(x, y, z) for x in (0, a) for y in (0, b) for z in (0, c)], dtype=float)
    body = triangulate_body(_only("torso", corners + [0.1, 0.2, 1.0]))
    assert len(body) == 12
    assert body.part_area("torso") == pytest.approx(cuboid_area(a, b, c), rel=0.05)
    assert set(body.skipped) == set(PART_IDS) - {"torso"}


def test_normals_point_outward_and_are_unit():
    frame = synthesize_walker(SyntheticGaitParams(), 2.5, 50, seed=0).frames[10]
    body = triangulate_body(frame)
    for k, part in enumerate(body.part_ids):
        sel = body.part_index == k
        centroid = frame.parts[part].mean(axis=0)
        dots = np.einsum("ij,ij->i", body.normals[sel], body.centers[sel] - centroid)
        assert np.all(dots > 0)
    np.testing.assert_allclose(np.linalg.norm(body.normals, axis=1), 1.0, atol=1e-9)
    assert np.all(body.areas > 0)
    s = body.surfaces[0]
    assert s.part_id in PART_IDS and s.area > 0


def test_vertices_are_input_points_and_edges_manifold():
    frame = synthesize_walker(SyntheticGaitParams(), 2.5, 50, seed=3).frames[0]
    body = triangulate_body(frame)
    for k, part in enumerate(body.part_ids):
        pts = frame.parts[part]
        sel = body.part_index == k
        verts = body.vertices[sel]
        assert verts.min() >= 0 and verts.max() < len(pts)
        np.testing.assert_allclose(pts[verts].mean(axis=1), body.centers[sel], atol=1e-15)
        # non-overlapping: every edge is shared by at most two triangles
        edges = np.sort(np.concatenate([verts[:, [0, 1]], verts[:, [1, 2]], verts[:, [0, 2]]]), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        assert counts.max() <= 2
        # and no triangle appears twice
        assert len(np.unique(np.sort(verts, axis=1), axis=0)) == len(verts)


def test_deterministic():
    frame = static_frame(seed=4)
    assert triangulate_body(frame) == triangulate_body(frame)
    copy = BodyFrame(frame.timestamp, {k: v.copy() for k, v in frame.parts.items()})
    assert triangulate_body(copy) == triangulate_body(frame)


def test_empty_body_error():
    parts = {p: np.zeros((3, 3)) for p in PART_IDS}
    with pytest.raises(EmptyBodyError):
        triangulate_body(BodyFrame(0.0, parts))


def test_degenerate_part_skipped_and_reported():
    frame = static_frame()
    parts = dict(frame.parts)
    parts["left_hand"] = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float)
    body = triangulate_body(BodyFrame(0.0, parts))
    assert "left_hand" in body.skipped
    assert "left_hand" not in body.part_ids
    assert skipped_report([body, body])["left_hand"] == 2


@given(seed=st.integers(0, 10_000), angles=st.tuples(*[st.floats(-math.pi, math.pi)] * 3),
       shift=st.tuples(*[st.floats(-5, 5)] * 3))
def test_area_invariant_under_rigid_motion(seed, angles, shift):
    pts = sphere_points(60, seed) * np.array([0.12, 0.1, 0.2])
    rot = Rotation.from_euler("xyz", angles).as_matrix()
    moved = pts @ rot.T + np.asarray(shift)
    a0 = triangulate_body(_only("torso", pts)).part_area("torso")
    a1 = triangulate_body(_only("torso", moved)).part_area("torso")
    assert a1 == pytest.approx(a0, rel=1e-9)


@given(seed=st.integers(0, 10_000))
def test_alpha_monotone_in_retained_simplices(seed):
    pts = np.random.default_rng(seed).uniform(-1, 1, size=(40, 3))
    alphas = [0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.5, 5.0]
    counts = [alpha_complex(pts, a)[1] for a in alphas]
    assert counts == sorted(counts)


def test_alpha_config_defaults_and_validation():
    cfg = AlphaConfig()
    assert cfg.radius("torso") == 0.25
    assert cfg.radius("head") == 0.15 and cfg.radius("left_thigh") == 0.15
    assert cfg.radius("left_hand") == 0.08 and cfg.radius("right_foot") == 0.08
    assert set(DEFAULT_RADII) == set(PART_IDS)
    assert AlphaConfig({"torso": 0.3}).radius("torso") == 0.3
    with pytest.raises(ValueError):
        AlphaConfig({"head": 0.0})


def test_topology_cache_matches_fresh_triangulation_for_rigid_motion():
    seq = synthesize_walker(SyntheticGaitParams(), 2.5, 50, seed=2)
    cached = triangulate_sequence(seq)
    fresh_tri = BodyTriangulator(rigid_tol=0.0)
    for f, b in zip(seq.frames[:5], cached[:5]):
        ref = fresh_tri(f)
        assert ref.part_ids == b.part_ids
        for part in ref.part_ids:
            assert b.part_area(part) == pytest.approx(ref.part_area(part), rel=0.02)


def test_ascii_stl_dump(tmp_path):
    frame = static_frame()
    body = triangulate_body(frame)
    path = write_ascii_stl(body, frame, tmp_path / "b.stl")
    text = path.read_text()
    assert text.startswith("solid body")
    assert text.count("facet normal") == len(body)
    assert text.rstrip().endswith("endsolid body")
