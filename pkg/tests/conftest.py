import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from wigait.kinematics import PART_IDS, BodyFrame, MeshSequence  # noqa: E402
from wigait.scene import SceneConfig  # noqa: E402


def box_points(center, half, n_side=3):
    """Points on the surface of an axis-aligned box (corners, edges and faces)."""
    g = np.linspace(-1, 1, n_side)
    pts = np.array([(x, y, z) for x in g for y in g for z in g])
    pts = pts[np.max(np.abs(pts), axis=1) == 1]
    return np.asarray(center) + pts * np.asarray(half)


def blob(center, scale, n, rng):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center) + v * np.asarray(scale)


def static_frame(t=0.0, seed=0, offset=(0.0, 0.0, 0.0)):
    """A crude 14-part body, every part a small point blob."""
    rng = np.random.default_rng(seed)
    parts = {}
    for k, p in enumerate(PART_IDS):
        c = np.array([0.0, 0.05 * (k % 3 - 1), 0.1 + 0.12 * k]) + np.asarray(offset)
        parts[p] = blob(c, (0.04, 0.04, 0.05), 12, rng)
    return BodyFrame(t, parts)


def static_sequence(n_frames=5, fps=250.0, **meta):
    f0 = static_frame()
    frames = [BodyFrame(k / fps, f0.parts) for k in range(n_frames)]
    return MeshSequence(frames=tuple(frames), fps=fps, **meta)


@pytest.fixture
def scene():
    return SceneConfig()


def point_scatterer_walk(speed=1.0, duration=1.0, fps=250.0, start=1.0, radius=0.02, n_points=40):
    """A tiny sphere (torso part only) moving straight away from co-located transceivers."""
    scene = SceneConfig(tx=(-0.01, 0.0, 1.1), rx=(0.01, 0.0, 1.1), start_point=(0.0, start, 1.1))
    rng = np.random.default_rng(0)
    ball = blob((0.0, start, 1.1), radius, n_points, rng)
    n = int(round(duration * fps)) + 1
    frames = []
    for k in range(n):
        parts = {p: np.zeros((0, 3)) for p in PART_IDS}
        parts["torso"] = ball + [0.0, speed * k / fps, 0.0]
        frames.append(BodyFrame(k / fps, parts))
    seq = MeshSequence(frames=tuple(frames), fps=fps, walk_direction=(0.0, 1.0, 0.0))
    return seq, scene


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
