import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import point_scatterer_walk, static_sequence
from oracles import dft_peak_hz, ray_cast_visible, sphere_points
from wigait.geometry import TriangulatedBody, triangulate_body
from wigait.kinematics import PART_IDS, BodyFrame, place_in_scene, resample
from wigait.rfsim import (
    ChannelRecording,
    CsiEmulation,
    PhaseTable,
    ScatteringParams,
    greens,
    read_recording,
    recording_from_csi,
    scattered_terms,
    scattering_coefficient,
    simulate_csi_walk,
    simulate_frame,
    simulate_walk,
    specular_vector,
    visible_set,
    write_recording,
)
from wigait.scene import SceneConfig
from wigait.walker import SyntheticGaitParams, synthesize_walker

LAM = SceneConfig().wavelength


def _unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


def _body(centers, normals, areas, t=0.0):
    centers = np.atleast_2d(np.asarray(centers, float))
    n = len(centers)
    return TriangulatedBody(
        t, ("torso",), np.zeros(n, int), np.tile([0, 1, 2], (n, 1)), centers,
        np.atleast_2d(np.asarray(normals, float)), np.asarray(areas, float),
    )


def _hand_term(c, n, area, phase, tx, rx, p, lam):
    """Born product term evaluated from the scalar formulas."""
    c, n, tx, rx = (np.asarray(v, float) for v in (c, n, tx, rx))
    x_inc = _unit(c - tx)
    x_rx = _unit(rx - c)
    cos_inc = -float(x_inc @ n)
    x_spec = x_inc - 2 * float(x_inc @ n) * n
    cos_i = float(x_rx @ x_spec)
    lobe = max(cos_i, 0.0) ** p.m
    r = math.sqrt(area * cos_inc) * (p.alpha * complex(math.cos(phase), math.sin(phase)) + p.beta * lobe)

    def g(a, b):
        d = float(np.linalg.norm(a - b))
        return complex(math.cos(2 * math.pi * d / lam), math.sin(2 * math.pi * d / lam)) / (4 * math.pi * d)

    return g(tx, c) * r * g(c, rx)


# -- elementary pieces -------------------------------------------------------------

def test_specular_examples():
    np.testing.assert_allclose(specular_vector([0, 0, -1], [0, 0, 1]), [0, 0, 1])
    x = _unit([1, 0, 0])
    np.testing.assert_allclose(specular_vector(x, [0, 0, 1]), x)
    x45 = _unit([1, 0, -1])
    out = specular_vector(x45, [0, 0, 1])
    assert float(out @ [0, 0, 1]) == pytest.approx(-float(x45 @ [0, 0, 1]))
    assert math.degrees(math.acos(float(out @ [0, 0, 1]))) == pytest.approx(45.0)
    np.testing.assert_allclose(out, _unit([1, 0, 1]))
    with pytest.raises(ValueError):
        specular_vector([0, 0, -2], [0, 0, 1])


@given(st.tuples(*[st.floats(-1, 1)] * 3), st.tuples(*[st.floats(-1, 1)] * 3))
def test_specular_reflection_law(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    x, n = _unit(a), _unit(b)
    out = specular_vector(x, n)
    assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-12)
    assert float(out @ n) == pytest.approx(-float(x @ n), abs=1e-12)
    # tangential component unchanged
    np.testing.assert_allclose(out - float(out @ n) * n, x - float(x @ n) * n, atol=1e-12)


def test_greens_examples():
    g = greens([0, 0, 0], [1, 0, 0], LAM)
    assert abs(g) == pytest.approx(1 / (4 * math.pi), rel=1e-12)
    assert abs(g) == pytest.approx(0.0795775, abs=1e-7)
    g_lam = greens([0, 0, 0], [0, LAM, 0], LAM)
    assert math.cos(np.angle(g_lam)) == pytest.approx(1.0, abs=1e-9)
    p1, p2 = np.array([0.1, 0.2, 0.3]), np.array([-1.0, 2.0, 0.5])
    assert greens(p1, p2, LAM) == greens(p2, p1, LAM)
    with pytest.raises(ValueError):
        greens(p1, p1, LAM)


def _surface(area=0.01, normal=(0, -1, 0), center=(0, 1, 0)):
    return _body([center], [normal], [area]).surfaces[0]


def test_scattering_normal_incidence_specular_receiver():
    p = ScatteringParams(alpha=0.0, beta=0.7, m=8)
    s = _surface(area=0.04)
    # transmitter and receiver both on the surface normal
    r = scattering_coefficient(s, [0, 0, 0], [0, 0.5, 0], p, phase=1.0)
    assert r == pytest.approx(math.sqrt(0.04) * 0.7)


def test_scattering_pure_diffuse_and_area_scaling():
    p = ScatteringParams(alpha=0.3, beta=0.0)
    s = _surface(area=0.02)
    tx = np.array([0.4, 0.0, 0.1])
    cos_inc = float(-_unit(s.center - tx) @ s.normal)
    vals = [abs(scattering_coefficient(s, tx, rx, p, 0.2)) for rx in ([0, 0, 0], [1, 0, 0], [-0.5, 0.3, 1])]
    np.testing.assert_allclose(vals, math.sqrt(0.02 * cos_inc) * 0.3, rtol=1e-12)
    p2 = ScatteringParams()
    r1 = scattering_coefficient(s, tx, [0.2, 0, 0], p2, 0.5)
    r4 = scattering_coefficient(_surface(area=0.08), tx, [0.2, 0, 0], p2, 0.5)
    assert abs(r4) == pytest.approx(2 * abs(r1), rel=1e-12)


def test_scattering_back_facing_error():
    with pytest.raises(ValueError, match="theta_inc"):
        scattering_coefficient(_surface(normal=(0, 1, 0)), [0, 0, 0], [0.1, 0, 0], ScatteringParams(), 0.0)


def test_lobe_clamped_for_odd_exponent():
    # receiver behind the specular direction: cos(theta_i) < 0 must not flip the sign
    p = ScatteringParams(alpha=0.0, beta=1.0, m=3)
    s = _surface(normal=_unit([0, -1, 0]))
    r = scattering_coefficient(s, [0.5, 0, 0], [1.0, 0.9, 0], p, 0.0)
    assert r == 0


def test_scattering_params_validation():
    with pytest.raises(ValueError):
        ScatteringParams(alpha=-1)
    with pytest.raises(ValueError):
        ScatteringParams(m=0.5)
    p = ScatteringParams()
    assert (p.alpha, p.beta, p.m) == (0.1, 1.0, 8.0)


# -- visibility ------------------------------------------------------------------

def test_single_triangle_facing_included():
    body = _body([[0, 1, 1.1]], [[0, -1, 0]], [0.01])
    assert list(visible_set(body, [-0.32, 0, 1.1], [0.32, 0, 1.1])) == [0]


def test_single_triangle_facing_away_excluded():
    body = _body([[0, 1, 1.1]], [[0, 1, 0]], [0.01])
    assert len(visible_set(body, [-0.32, 0, 1.1], [0.32, 0, 1.1])) == 0


def test_sphere_back_hemisphere_excluded():
    pts = sphere_points(500, seed=1) * 0.2 + [0.0, 1.0, 1.1]
    parts = {p: np.zeros((0, 3)) for p in PART_IDS}
    parts["torso"] = pts
    frame = BodyFrame(0.0, parts)
    body = triangulate_body(frame)
    tx, rx = np.array([-0.32, 0, 1.1]), np.array([0.32, 0, 1.1])
    corners = pts[body.vertices]
    hidden = ~(ray_cast_visible(corners, tx) & ray_cast_visible(corners, rx))
    assert hidden.sum() > 0.3 * len(body)
    vis = np.zeros(len(body), bool)
    vis[visible_set(body, tx, rx)] = True
    excluded = (~vis[hidden]).mean()
    assert excluded >= 0.99


# -- Born sum ----------------------------------------------------------------------

def test_empty_body_gives_direct_path(scene):
    body = _body(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    s = simulate_frame(body, scene, ScatteringParams(), np.zeros(0))
    assert s == greens(scene.tx, scene.rx, scene.wavelength)


def test_one_surface_hand_computation(scene):
    p = ScatteringParams(alpha=0.2, beta=0.9, m=5)
    c, n = np.array([0.05, 1.2, 1.0]), _unit([0.1, -1, 0.05])
    body = _body([c], [n], [0.003])
    s = simulate_frame(body, scene, p, [0.7])
    direct = greens(scene.tx, scene.rx, scene.wavelength)
    expected = direct + _hand_term(c, n, 0.003, 0.7, scene.tx, scene.rx, p, scene.wavelength)
    assert s == pytest.approx(expected, rel=1e-12)


def _walker_body(seed=0):
    seq = place_in_scene(synthesize_walker(SyntheticGaitParams(), 2.5, 50, seed=seed), SceneConfig())
    return triangulate_body(seq.frames[20])


def test_doubling_areas_scales_scattered_terms(scene):
    body = _walker_body()
    ph = np.random.default_rng(0).uniform(0, 2 * np.pi, len(body))
    p = ScatteringParams()
    t1 = scattered_terms(body, scene, p, ph)
    t2 = scattered_terms(replace(body, areas=2 * body.areas), scene, p, ph)
    np.testing.assert_allclose(t2, math.sqrt(2) * t1, rtol=1e-12)
    direct = greens(scene.tx, scene.rx, scene.wavelength)
    s1 = simulate_frame(body, scene, p, ph)
    s2 = simulate_frame(replace(body, areas=2 * body.areas), scene, p, ph)
    assert s2 - direct == pytest.approx(math.sqrt(2) * (s1 - direct), rel=1e-10)


def test_born_sum_linearity_and_bound(scene):
    body = _walker_body(1)
    ph = np.random.default_rng(1).uniform(0, 2 * np.pi, len(body))
    p = ScatteringParams()
    terms = scattered_terms(body, scene, p, ph)
    s = simulate_frame(body, scene, p, ph)
    direct = greens(scene.tx, scene.rx, scene.wavelength)
    assert s == pytest.approx(direct + terms.sum(), rel=1e-12)
    vis = visible_set(body, scene.tx, scene.rx)
    assert len(vis) > 10
    # removing one visible surface changes s_r by exactly its term
    i = vis[len(vis) // 2]
    keep = np.ones(len(body), bool)
    keep[i] = False
    removed = body.subset(keep)
    terms_rm = scattered_terms(removed, scene, p, ph[keep])
    assert direct + terms_rm.sum() == pytest.approx(s - terms[i], rel=1e-9)
    # magnitude bound from the model
    c = body.centers[vis]
    cos_inc = -np.einsum("ij,ij->i", (c - scene.tx) / np.linalg.norm(c - scene.tx, axis=1)[:, None], body.normals[vis])
    bound = (np.abs(greens(scene.tx, c, scene.wavelength)) * np.sqrt(body.areas[vis] * cos_inc)
             * (p.alpha + p.beta) * np.abs(greens(c, scene.rx, scene.wavelength)))
    assert np.all(np.abs(terms[vis]) <= bound * (1 + 1e-12))


@given(shift=st.tuples(*[st.floats(-10, 10)] * 3))
def test_translation_invariance(shift):
    sc = SceneConfig()
    body = _walker_body(2)
    ph = np.linspace(0, 6, len(body))
    d = np.asarray(shift)
    moved_scene = SceneConfig(tx=sc.tx + d, rx=sc.rx + d, start_point=sc.start_point + d)
    moved = replace(body, centers=body.centers + d)
    p = ScatteringParams()
    a = simulate_frame(body, sc, p, ph)
    b = simulate_frame(moved, moved_scene, p, ph)
    assert b == pytest.approx(a, rel=1e-7)


def test_phase_count_checked(scene):
    body = _walker_body()
    with pytest.raises(ValueError, match="phases"):
        simulate_frame(body, scene, ScatteringParams(), np.zeros(len(body) - 1))


def test_phase_table_persistent_and_seeded():
    t = PhaseTable(3)
    a = t.lookup(np.array([5, 1, 9]))
    b = t.lookup(np.array([9, 5, 2]))
    assert b[0] == a[2] and b[1] == a[0]
    assert len(t) == 4
    assert np.all((a >= 0) & (a < 2 * np.pi))
    np.testing.assert_array_equal(PhaseTable(3).lookup(np.array([5, 1, 9])), a)


# -- walks ---------------------------------------------------------------------------

def test_static_body_no_doppler(scene):
    seq = static_sequence(n_frames=126, fps=250.0)
    seq = replace(seq, frames=tuple(f.transformed(lambda p: p + [0, 1.5, 0.3]) for f in seq.frames),
                  walk_direction=(0, 1, 0))
    rec = simulate_walk(seq, scene, ScatteringParams(), seed=0)
    mag = np.abs(rec.streams[0])
    assert rec.n_samples == 251
    residual = mag - mag.mean()
    assert np.sum(residual**2) < 1e-12 * np.sum(mag**2)


def test_point_scatterer_two_way_doppler():
    seq, scene = point_scatterer_walk(speed=1.0, duration=1.0)
    rec = simulate_walk(seq, scene, ScatteringParams(), seed=0)
    mag = np.abs(rec.streams[0])
    peak = dft_peak_hz(mag - mag.mean(), rec.sample_rate, 4096)
    assert 2 * 1.0 / LAM == pytest.approx(35.49, abs=0.01)
    assert peak == pytest.approx(2 * 1.0 / LAM, abs=2.0)


def test_walker_doppler_matches_geometric_psi():
    scene = SceneConfig()
    gp = SyntheticGaitParams(mean_speed=1.0, gait_cycle=1.2, step_length=0.6)
    seq = resample(place_in_scene(synthesize_walker(gp, 2.5, 50, seed=0), scene), 250.0)
    rec = simulate_walk(seq, scene, ScatteringParams(), seed=0)
    mag = np.abs(rec.streams[0])
    x = mag - mag.mean()
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x)), 8192)) ** 2
    f = np.fft.rfftfreq(8192, 1 / rec.sample_rate)
    band = (f > 5) & (f < 150)
    # power-weighted median frequency of the scattered content
    cum = np.cumsum(spec[band])
    f_med = f[band][np.searchsorted(cum, 0.5 * cum[-1])]
    assert f_med == pytest.approx(scene.psi() * 1.0 / scene.wavelength, rel=0.10)


def test_walk_deterministic_and_seeded():
    seq, scene = point_scatterer_walk(duration=0.2)
    a = simulate_walk(seq, scene, ScatteringParams(), seed=4)
    b = simulate_walk(seq, scene, ScatteringParams(), seed=4)
    c = simulate_walk(seq, scene, ScatteringParams(), seed=5)
    assert a == b
    assert a.streams.tobytes() == b.streams.tobytes()
    assert a != c
    assert a.sample_rate == 500.0 and a.origin == "synthetic" and a.streams.shape[0] == 1


def test_walk_requires_high_frame_rate(scene):
    seq = static_sequence(n_frames=5, fps=50.0)
    with pytest.raises(ValueError, match="resample"):
        simulate_walk(seq, scene, ScatteringParams(), seed=0)


def test_csi_emulation_layout_and_structure():
    seq, scene = point_scatterer_walk(duration=0.2)
    rec = simulate_csi_walk(seq, scene, ScatteringParams(), seed=1)
    assert rec.origin == "measured"
    assert rec.layout == (3, 30) and rec.streams.shape == (90, 101)
    again = simulate_csi_walk(seq, scene, ScatteringParams(), seed=1)
    assert again == rec
    quiet = simulate_csi_walk(seq, scene, ScatteringParams(), seed=1,
                              emu=CsiEmulation(noise_level=0.0, clutter_level=0.0, gain_jitter_db=0.0))
    single = simulate_walk(seq, scene, ScatteringParams(), seed=1)
    # the central antenna without impairments is the single-stream simulation up to a phase per subcarrier
    central = np.abs(quiet.streams[30:60])
    np.testing.assert_allclose(central, np.broadcast_to(np.abs(single.streams[0]), central.shape), rtol=1e-12)


def test_recording_from_csi_ordering():
    rng = np.random.default_rng(0)
    csi = rng.normal(size=(50, 3, 30)) + 1j * rng.normal(size=(50, 3, 30))
    rec = recording_from_csi(csi, 500.0, LAM)
    assert rec.layout == (3, 30)
    np.testing.assert_array_equal(rec.streams[1 * 30 + 7], csi[:, 1, 7])
    with pytest.raises(ValueError):
        recording_from_csi(csi[:, 0], 500.0, LAM)


def test_recording_invariants():
    with pytest.raises(ValueError, match="one stream"):
        ChannelRecording(np.zeros((2, 10)), 500.0, LAM, layout=(1, 2))
    with pytest.raises(ValueError, match="layout"):
        ChannelRecording(np.zeros((90, 10)), 500.0, LAM, origin="measured", layout=(3, 29))
    with pytest.raises(ValueError):
        ChannelRecording(np.zeros(10), 0.0, LAM)


@pytest.mark.parametrize("origin,shape,layout", [("synthetic", (1, 37), (1, 1)), ("measured", (90, 12), (3, 30))])
def test_recording_round_trip(tmp_path, origin, shape, layout):
    rng = np.random.default_rng(2)
    data = rng.normal(size=shape) + 1j * rng.normal(size=shape)
    rec = ChannelRecording(data, 500.0, LAM, origin=origin, layout=layout, provenance={"seed": 3})
    path = write_recording(rec, tmp_path / "r.wgrc")
    back = read_recording(path)
    assert back == rec
    assert back.streams.tobytes() == rec.streams.tobytes()
    assert back.provenance == {"seed": 3}
    assert path.read_bytes()[:4] == b"WGRC"


def test_recording_corrupt_files(tmp_path):
    rec = ChannelRecording(np.ones((1, 8)), 500.0, LAM)
    path = write_recording(rec, tmp_path / "r.wgrc")
    raw = path.read_bytes()
    (tmp_path / "t.wgrc").write_bytes(raw[:-5])
    with pytest.raises(ValueError, match="expected"):
        read_recording(tmp_path / "t.wgrc")
    (tmp_path / "m.wgrc").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="not a recording"):
        read_recording(tmp_path / "m.wgrc")
