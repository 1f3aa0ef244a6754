"""Body-mesh sequences: containers, I/O, world alignment and resampling.

A walk is a sequence of :class:`BodyFrame` objects, each holding a point
cloud per body part. Points of a part keep their identity across frames
(the i-th torso point in one frame is the i-th torso point in the next),
which is what mesh-recovery models emit and what per-point interpolation
relies on.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .scene import SceneConfig

PART_IDS = (
    "head",
    "torso",
    "left_shoulder",
    "right_shoulder",
    "left_upper_arm",
    "right_upper_arm",
    "left_hand",
    "right_hand",
    "left_thigh",
    "right_thigh",
    "left_leg",
    "right_leg",
    "left_foot",
    "right_foot",
)
LABELS = ("healthy", "unhealthy", "unknown")
UNITS = ("meter", "pixel")

MESH_FORMAT = "wigait-mesh"
MESH_VERSION = 1


class MeshFormatError(ValueError):
    """Raised for malformed mesh containers or sequences violating invariants."""

    def __init__(self, message: str, frame: int | None = None):
        self.frame = frame
        if frame is not None:
            message = f"frame {frame}: {message}"
        super().__init__(message)


def _frozen_points(points) -> np.ndarray:
    arr = np.array(points, dtype=float)
    if arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"points must have shape (n, 3), got {arr.shape}")
    arr.setflags(write=False)
    return arr


def is_degenerate(points: np.ndarray, rtol: float = 1e-9) -> bool:
    """True when a part cannot carry a 3D triangulation (< 4 points or coplanar)."""
    if len(points) < 4:
        return True
    centered = points - points.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    return bool(sv[0] == 0 or sv[-1] <= rtol * sv[0])


@dataclass(frozen=True)
class BodyFrame:
    timestamp: float
    parts: Mapping[str, np.ndarray]

    def __post_init__(self):
        parts = {name: _frozen_points(pts) for name, pts in self.parts.items()}
        object.__setattr__(self, "parts", parts)
        object.__setattr__(self, "timestamp", float(self.timestamp))

    def missing_parts(self) -> list[str]:
        return [p for p in PART_IDS if p not in self.parts]

    def degenerate_parts(self) -> list[str]:
        return [p for p in PART_IDS if p in self.parts and is_degenerate(self.parts[p])]

    def keypoint(self, part: str) -> np.ndarray:
        """Mean position of a part's points; NaN when the part has no points."""
        pts = self.parts[part]
        if len(pts) == 0:
            return np.full(3, np.nan)
        return pts.mean(axis=0)

    def centroid(self) -> np.ndarray:
        pts = [p for p in self.parts.values() if len(p)]
        if not pts:
            return np.full(3, np.nan)
        return np.concatenate(pts).mean(axis=0)

    def transformed(self, fn) -> "BodyFrame":
        return BodyFrame(self.timestamp, {k: fn(v) for k, v in self.parts.items()})

    def __eq__(self, other):
        if not isinstance(other, BodyFrame):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and self.parts.keys() == other.parts.keys()
            and all(np.array_equal(self.parts[k], other.parts[k]) for k in self.parts)
        )

    __hash__ = None


@dataclass(frozen=True)
class MeshSequence:
    frames: tuple[BodyFrame, ...]
    fps: float
    subject_id: str = ""
    label: str = "unknown"
    walk_direction: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    units: str = "meter"
    condition: str = ""

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        wd = np.asarray(self.walk_direction, dtype=float).reshape(3)
        norm = np.linalg.norm(wd)
        if not norm > 0:
            raise MeshFormatError("walk_direction must be non-zero")
        wd = wd / norm
        wd.setflags(write=False)
        object.__setattr__(self, "walk_direction", wd)
        object.__setattr__(self, "fps", float(self.fps))
        if not self.condition:
            object.__setattr__(self, "condition", self.label)
        self.validate()

    def validate(self) -> None:
        if not self.fps > 0:
            raise MeshFormatError(f"fps must be positive, got {self.fps}")
        if self.label not in LABELS:
            raise MeshFormatError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.units not in UNITS:
            raise MeshFormatError(f"units must be one of {UNITS}, got {self.units!r}")
        if not self.frames:
            raise MeshFormatError("sequence has no frames")
        step = 1.0 / self.fps
        for i, frame in enumerate(self.frames):
            missing = frame.missing_parts()
            if missing:
                raise MeshFormatError(f"missing part(s) {', '.join(missing)}", frame=i)
            if i:
                dt = frame.timestamp - self.frames[i - 1].timestamp
                if not dt > 0:
                    raise MeshFormatError("timestamps not strictly increasing", frame=i)
                if abs(dt - step) > 0.01 * step:
                    raise MeshFormatError(
                        f"frame spacing {dt:.6g} s deviates from 1/fps = {step:.6g} s by more than 1%",
                        frame=i,
                    )
        c0, c1 = self.frames[0].centroid(), self.frames[-1].centroid()
        if np.all(np.isfinite(c0)) and np.all(np.isfinite(c1)):
            scale = max(1.0, float(np.abs(np.concatenate([c0, c1])).max()))
            if (c1 - c0) @ self.walk_direction < -1e-9 * scale:
                raise MeshFormatError("net centroid motion is against the walk direction")

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    @property
    def duration(self) -> float:
        return self.frames[-1].timestamp - self.frames[0].timestamp

    def __len__(self) -> int:
        return len(self.frames)

    def part_track(self, part: str) -> np.ndarray:
        """Stack a part's points over time, shape (frames, points, 3)."""
        counts = {len(f.parts[part]) for f in self.frames}
        if len(counts) != 1:
            raise MeshFormatError(f"part {part!r} changes point count across frames")
        return np.stack([f.parts[part] for f in self.frames])

    def keypoints(self, part: str) -> np.ndarray:
        return np.stack([f.keypoint(part) for f in self.frames])

    def centroids(self) -> np.ndarray:
        return np.stack([f.centroid() for f in self.frames])

    def header(self) -> dict:
        return {
            "fps": self.fps,
            "subject_id": self.subject_id,
            "label": self.label,
            "condition": self.condition,
            "units": self.units,
            "walk_direction": [float(v) for v in self.walk_direction],
        }

    def __eq__(self, other):
        if not isinstance(other, MeshSequence):
            return NotImplemented
        return self.header() == other.header() and self.frames == other.frames

    __hash__ = None


# -- mesh container -----------------------------------------------------------

def mesh_to_dict(seq: MeshSequence) -> dict:
    return {
        "format": MESH_FORMAT,
        "version": MESH_VERSION,
        "header": seq.header(),
        "frames": [
            {
                "timestamp": f.timestamp,
                "parts": {name: f.parts[name].tolist() for name in f.parts},
            }
            for f in seq.frames
        ],
    }


def write_mesh_sequence(seq: MeshSequence, path: str | Path) -> Path:
    path = Path(path)
    text = json.dumps(mesh_to_dict(seq), separators=(",", ":"))
    path.write_text(text)
    return path


def _parse_points(raw, frame_idx: int, part: str) -> np.ndarray:
    try:
        return _frozen_points(raw)
    except (TypeError, ValueError) as exc:
        raise MeshFormatError(f"part {part!r}: {exc}", frame=frame_idx) from None


def mesh_from_dict(doc: dict) -> MeshSequence:
    if not isinstance(doc, dict) or doc.get("format") != MESH_FORMAT:
        raise MeshFormatError(f"not a {MESH_FORMAT} document")
    if doc.get("version") != MESH_VERSION:
        raise MeshFormatError(f"unsupported version {doc.get('version')!r}")
    try:
        header = doc["header"]
        raw_frames = doc["frames"]
        fps = header["fps"]
    except (KeyError, TypeError) as exc:
        raise MeshFormatError(f"missing field {exc}") from None

    frames = []
    for i, raw in enumerate(raw_frames):
        if "timestamp" not in raw or "parts" not in raw:
            raise MeshFormatError("frame record needs 'timestamp' and 'parts'", frame=i)
        missing = [p for p in PART_IDS if p not in raw["parts"]]
        if missing:
            raise MeshFormatError(f"missing part(s) {', '.join(missing)}", frame=i)
        parts = {name: _parse_points(pts, i, name) for name, pts in raw["parts"].items()}
        frames.append(BodyFrame(raw["timestamp"], parts))
    return MeshSequence(
        frames=tuple(frames),
        fps=fps,
        subject_id=header.get("subject_id", ""),
        label=header.get("label", "unknown"),
        walk_direction=header.get("walk_direction", [1.0, 0.0, 0.0]),
        units=header.get("units", "meter"),
        condition=header.get("condition", ""),
    )


def ingest_mesh_sequence(path: str | Path) -> MeshSequence:
    """Read and validate a mesh container file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MeshFormatError(f"{path}: not valid JSON ({exc})") from None
    return mesh_from_dict(doc)


# -- alignment and resampling ---------------------------------------------------

def _rotate_z(points: np.ndarray, angle: float, center: np.ndarray) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return (points - center) @ rot.T + center


def bearing_angles(centroids: np.ndarray, camera_distance: float) -> np.ndarray:
    """Horizontal angle between the camera axis and the camera-to-centroid ray.

    Coordinates follow the side-view convention: x runs along the image
    horizontal, y is depth away from the camera and z is up. The camera axis
    is the depth direction through the middle of the centroid's x-range, and
    the camera sits ``camera_distance`` in front of the mean centroid depth.
    """
    x = centroids[:, 0]
    axis_x = 0.5 * (x.min() + x.max())
    depth = camera_distance + (centroids[:, 1] - centroids[:, 1].mean())
    return np.arctan2(x - axis_x, depth)


def align_to_world(seq: MeshSequence, camera_distance: float, walk_distance: float) -> MeshSequence:
    """Convert a pixel-unit sequence into meters and undo the viewing-angle rotation.

    The scale is fixed by requiring the centroid to travel ``walk_distance``
    between the first and last frame. Each frame is then rotated about the
    vertical axis through its centroid by the camera bearing of that
    centroid, and the result is shifted so the first centroid sits at the
    horizontal origin with the lowest point on the floor.
    """
    if seq.units != "pixel":
        raise MeshFormatError("align_to_world expects a pixel-unit sequence")
    if not (camera_distance > 0 and walk_distance > 0):
        raise ValueError("camera_distance and walk_distance must be positive")
    cents = seq.centroids()
    disp = cents[-1, :2] - cents[0, :2]
    span = float(np.hypot(*disp))
    if span == 0 or not np.isfinite(span):
        raise MeshFormatError("zero centroid displacement; cannot infer pixel scale")
    scale = walk_distance / span
    angles = bearing_angles(cents * scale, camera_distance)

    frames = []
    for frame, angle, cen in zip(seq.frames, angles, cents * scale):
        frames.append(frame.transformed(lambda p, a=angle, c=cen: _rotate_z(p * scale, a, c)))
    origin = cents[0] * scale
    floor = min(float(p[:, 2].min()) for f in frames for p in f.parts.values() if len(p))
    shift = np.array([origin[0], origin[1], floor])
    frames = [f.transformed(lambda p: p - shift) for f in frames]
    direction = np.array([disp[0], disp[1], 0.0]) / span
    return replace(seq, frames=tuple(frames), units="meter", walk_direction=direction)


def resample(seq: MeshSequence, target_fps: float) -> MeshSequence:
    """Per-point linear interpolation onto a uniform grid at ``target_fps``.

    The first and last frames are kept; the grid spacing is stretched by less
    than half a frame so that it ends exactly on the last timestamp.
    """
    if target_fps < seq.fps:
        raise ValueError(f"target fps {target_fps} is below the original {seq.fps}")
    if target_fps == seq.fps:
        return seq
    t = seq.timestamps
    n_out = int(round(seq.duration * target_fps)) + 1
    tq = np.linspace(t[0], t[-1], n_out) if n_out > 1 else t[:1].copy()
    idx = np.clip(np.searchsorted(t, tq, side="right") - 1, 0, max(len(t) - 2, 0))
    if len(t) > 1:
        u = (tq - t[idx]) / (t[idx + 1] - t[idx])
    else:
        u = np.zeros_like(tq)
    nxt = np.minimum(idx + 1, len(t) - 1)

    tracks = {part: seq.part_track(part) for part in seq.frames[0].parts}
    frames = []
    for k in range(n_out):
        w = u[k]
        parts = {
            part: (1.0 - w) * tr[idx[k]] + w * tr[nxt[k]] for part, tr in tracks.items()
        }
        frames.append(BodyFrame(tq[k], parts))
    return replace(seq, frames=tuple(frames), fps=float(target_fps))


def place_in_scene(seq: MeshSequence, scene: SceneConfig) -> MeshSequence:
    """Rotate and translate a metric walk onto the scene route.

    The walk direction is turned onto the scene's direction (about the
    vertical axis) and the first-frame centroid is moved horizontally onto
    the start point. Heights are left untouched.
    """
    if seq.units != "meter":
        raise MeshFormatError("place_in_scene expects a meter-unit sequence")
    src = seq.walk_direction
    dst = scene.walk_direction
    angle = math.atan2(dst[1], dst[0]) - math.atan2(src[1], src[0])
    c0 = seq.frames[0].centroid()
    target = np.array([scene.start_point[0], scene.start_point[1], c0[2]])

    def move(p):
        return _rotate_z(p, angle, c0) - c0 + target

    frames = tuple(f.transformed(move) for f in seq.frames)
    return replace(seq, frames=frames, walk_direction=dst)


def crop_frames(seq: MeshSequence, fraction: float = 0.5) -> MeshSequence:
    """Keep the central ``fraction`` of the frames (ties broken toward the start)."""
    n = len(seq)
    keep = max(1, math.ceil(fraction * n))
    start = (n - keep) // 2
    return replace(seq, frames=seq.frames[start:start + keep])


def sequence_from_tracks(
    tracks: Mapping[str, np.ndarray],
    fps: float,
    t0: float = 0.0,
    **meta,
) -> MeshSequence:
    """Build a sequence from per-part point tracks of shape (frames, points, 3)."""
    n = {len(tr) for tr in tracks.values()}
    if len(n) != 1:
        raise ValueError("all part tracks need the same frame count")
    n_frames = n.pop()
    parts_all = {p: tracks.get(p, np.zeros((n_frames, 0, 3))) for p in PART_IDS}
    frames = [
        BodyFrame(t0 + k / fps, {p: tr[k] for p, tr in parts_all.items()})
        for k in range(n_frames)
    ]
    return MeshSequence(frames=tuple(frames), fps=fps, **meta)
