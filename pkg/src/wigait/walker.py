"""Parametric synthetic walkers.

Each body part is a rigid ellipsoid point cloud attached to a planar
skeleton. The pelvis advances with a speed that is modulated twice per gait
cycle (once per step), hips and shoulders swing in antiphase, and the knee
flexes during swing. Pelvis height is set by whichever leg reaches lowest so
the stance foot rests on the floor, which makes each foot's height peak once
per cycle.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .kinematics import PART_IDS, MeshSequence, sequence_from_tracks

REFERENCE_STATURE = 1.75

# Segment lengths and radii in meters for a 1.75 m body; scaled with stature.
_SEG = {
    "hip_height": 0.93,
    "hip_half_width": 0.09,
    "thigh": 0.43,
    "shank": 0.43,
    "ankle_height": 0.07,
    "foot": 0.26,
    "torso": 0.50,
    "shoulder_half_width": 0.24,
    "neck": 0.08,
    "upper_arm": 0.32,
    "forearm": 0.40,
}

# Ellipsoid semi-axes (forward, lateral, long) and point counts per part.
_SHAPES = {
    "head": ((0.095, 0.08, 0.115), 40),
    "torso": ((0.13, 0.20, 0.30), 60),
    "left_shoulder": ((0.055, 0.05, 0.05), 30),
    "left_upper_arm": ((0.04, 0.04, 0.16), 40),
    "left_hand": ((0.035, 0.035, 0.20), 35),
    "left_thigh": ((0.075, 0.075, 0.215), 50),
    "left_leg": ((0.055, 0.055, 0.215), 45),
    "left_foot": ((0.13, 0.045, 0.035), 35),
}

KNEE_FLEXION = 1.0  # rad, peak during swing
ELBOW_FLEXION = 0.35  # rad
FOOT_PITCH = 0.3  # rad, at peak knee flexion


class InfeasibleGaitError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticGaitParams:
    mean_speed: float = 1.0
    gait_cycle: float = 1.2
    step_length: float = 0.6
    speed_modulation: float = 0.1
    arm_swing: float = 0.35
    asymmetry: float = 0.0
    stature: float = REFERENCE_STATURE

    def check(self) -> None:
        for name in ("mean_speed", "gait_cycle", "step_length", "speed_modulation", "arm_swing", "stature"):
            if not getattr(self, name) > 0:
                raise InfeasibleGaitError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.asymmetry <= 1:
            raise InfeasibleGaitError(f"asymmetry must lie in [0, 1], got {self.asymmetry}")
        if self.speed_modulation * (1 + self.asymmetry) >= 1:
            raise InfeasibleGaitError("speed_modulation too large: speed would become negative")
        if self.step_length > self.mean_speed * self.gait_cycle:
            raise InfeasibleGaitError(
                f"step_length {self.step_length} exceeds mean_speed * gait_cycle "
                f"= {self.mean_speed * self.gait_cycle:.6g}"
            )
        leg = (_SEG["thigh"] + _SEG["shank"]) * self.stature / REFERENCE_STATURE
        if self.step_length >= 2 * leg:
            raise InfeasibleGaitError(f"step_length {self.step_length} needs a leg longer than {leg:.3f} m")

    def to_dict(self) -> dict:
        return asdict(self)


def _ellipsoid_template(semi_axes, n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * np.asarray(semi_axes)


def _rot_y(angle: np.ndarray) -> np.ndarray:
    """Rotation matrices turning the downward axis to (sin a, 0, -cos a); shape (T, 3, 3)."""
    c, s = np.cos(angle), np.sin(angle)
    z, o = np.zeros_like(angle), np.ones_like(angle)
    # R_y(-a)
    return np.stack(
        [np.stack([c, z, -s], -1), np.stack([z, o, z], -1), np.stack([s, z, c], -1)], -2
    )


def _place(template: np.ndarray, rot: np.ndarray, center: np.ndarray) -> np.ndarray:
    return np.einsum("tij,pj->tpi", rot, template) + center[:, None, :]


def _segment(start: np.ndarray, angle: np.ndarray, length: float):
    """Endpoint of a segment hanging from ``start`` at ``angle`` from the downward vertical."""
    d = np.stack([np.sin(angle), np.zeros_like(angle), -np.cos(angle)], -1)
    return start + length * d, d


def pelvis_speed(params: SyntheticGaitParams, t: np.ndarray, phase0: float) -> np.ndarray:
    w = 2 * math.pi / params.gait_cycle
    d = params.speed_modulation
    return params.mean_speed * (
        1 + d * np.sin(2 * (w * t + phase0)) + params.asymmetry * d * np.sin(w * t + phase0)
    )


def _pelvis_position(params: SyntheticGaitParams, t: np.ndarray, phase0: float) -> np.ndarray:
    """Closed-form integral of :func:`pelvis_speed` from 0 to t."""
    w = 2 * math.pi / params.gait_cycle
    d = params.speed_modulation
    a = params.asymmetry
    x = t - d / (2 * w) * (np.cos(2 * (w * t + phase0)) - math.cos(2 * phase0))
    x -= a * d / w * (np.cos(w * t + phase0) - math.cos(phase0))
    return params.mean_speed * x


def synthesize_walker(
    params: SyntheticGaitParams,
    duration: float,
    fps: float,
    seed: int,
    subject_id: str = "",
    label: str = "unknown",
    condition: str = "",
) -> MeshSequence:
    """Generate a walker moving along +x from the origin with feet on ``z = 0``.

    The seed controls the point templates of every part and the starting
    gait phase; given the same arguments the output is bit-identical.
    Left and right parts share mirrored templates, so with zero asymmetry
    the right side replays the left side half a cycle later.
    """
    params.check()
    if duration < 2 * params.gait_cycle:
        raise InfeasibleGaitError(
            f"duration {duration} s is shorter than two gait cycles ({2 * params.gait_cycle} s)"
        )
    if not fps > 0:
        raise ValueError("fps must be positive")
    rng = np.random.default_rng(seed)
    k = params.stature / REFERENCE_STATURE
    seg = {name: v * k for name, v in _SEG.items()}

    templates = {}
    for name, (axes, n) in _SHAPES.items():
        templates[name] = _ellipsoid_template(np.asarray(axes) * k, n, rng)
    for name in list(templates):
        if name.startswith("left_"):
            templates["right_" + name[5:]] = templates[name] * np.array([1.0, -1.0, 1.0])
    phase0 = float(rng.uniform(0, 2 * math.pi))

    n_frames = int(round(duration * fps)) + 1
    t = np.arange(n_frames) / fps
    w = 2 * math.pi / params.gait_cycle
    phi = w * t + phase0
    x_pelvis = _pelvis_position(params, t, phase0)

    leg_len = seg["thigh"] + seg["shank"]
    hip_amp = math.asin(min(0.99, params.step_length / (2 * leg_len)))
    sides = {
        "left": (0.0, 1.0, 1.0),
        "right": (math.pi, -1.0, 1.0 - params.asymmetry),
    }

    hip = {}
    knee = {}
    reach = {}
    for side, (offset, _, amp) in sides.items():
        ph = phi + offset
        hip[side] = amp * hip_amp * np.sin(ph)
        knee[side] = KNEE_FLEXION * amp * np.maximum(0.0, np.cos(ph)) ** 2
        reach[side] = seg["thigh"] * np.cos(hip[side]) + seg["shank"] * np.cos(hip[side] - knee[side])
    z_hip = np.maximum(reach["left"], reach["right"]) + seg["ankle_height"]

    tracks: dict[str, np.ndarray] = {}
    pelvis = np.stack([x_pelvis, np.zeros_like(t), z_hip], -1)
    upright = _rot_y(np.zeros_like(t))

    torso_center = pelvis + np.array([0.0, 0.0, 0.5 * seg["torso"]])
    tracks["torso"] = _place(templates["torso"], upright, torso_center)
    head_center = pelvis + np.array([0.02 * k, 0.0, seg["torso"] + seg["neck"] + _SHAPES["head"][0][2] * k])
    tracks["head"] = _place(templates["head"], upright, head_center)

    for side, (offset, lateral, amp) in sides.items():
        ph = phi + offset
        hip_joint = pelvis + np.array([0.0, lateral * seg["hip_half_width"], 0.0])
        knee_joint, thigh_dir = _segment(hip_joint, hip[side], seg["thigh"])
        shank_angle = hip[side] - knee[side]
        ankle, shank_dir = _segment(knee_joint, shank_angle, seg["shank"])
        tracks[f"{side}_thigh"] = _place(
            templates[f"{side}_thigh"], _rot_y(hip[side]), 0.5 * (hip_joint + knee_joint)
        )
        tracks[f"{side}_leg"] = _place(
            templates[f"{side}_leg"], _rot_y(shank_angle), 0.5 * (knee_joint + ankle)
        )
        # the foot stays level in stance and pitches toe-down with knee flexion in swing
        pitch = -FOOT_PITCH * knee[side] / KNEE_FLEXION
        foot_dir = np.stack([np.cos(pitch), np.zeros_like(t), np.sin(pitch)], -1)
        foot_center = ankle + 0.3 * seg["foot"] * foot_dir - np.array([0.0, 0.0, 0.035 * k])
        tracks[f"{side}_foot"] = _place(templates[f"{side}_foot"], _rot_y(pitch), foot_center)

        shoulder = pelvis + np.array([0.0, lateral * seg["shoulder_half_width"], seg["torso"] - 0.03 * k])
        arm_angle = -amp * params.arm_swing * np.sin(ph)
        elbow, _ = _segment(shoulder, arm_angle, seg["upper_arm"])
        forearm_angle = arm_angle + ELBOW_FLEXION
        wrist, _ = _segment(elbow, forearm_angle, seg["forearm"])
        tracks[f"{side}_shoulder"] = _place(templates[f"{side}_shoulder"], upright, shoulder)
        tracks[f"{side}_upper_arm"] = _place(
            templates[f"{side}_upper_arm"], _rot_y(arm_angle), 0.5 * (shoulder + elbow)
        )
        tracks[f"{side}_hand"] = _place(
            templates[f"{side}_hand"], _rot_y(forearm_angle), 0.5 * (elbow + wrist)
        )

    assert set(tracks) == set(PART_IDS)
    return sequence_from_tracks(
        tracks,
        fps=fps,
        subject_id=subject_id,
        label=label,
        condition=condition,
        walk_direction=(1.0, 0.0, 0.0),
        units="meter",
    )
