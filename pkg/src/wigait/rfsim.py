"""Born-approximation channel simulation of a walking body.

The received baseband sample for one body snapshot is the direct-path
Green's function plus one single-bounce term per visible sub-surface::

    s = g(P_tx, P_rx) + sum_i g(P_tx, c_i) R_i g(c_i, P_rx)

with the quasi-specular Lambertian coefficient
``R_i = sqrt(A_i cos th_inc) (alpha exp(j phi_i) + beta cos^m th_i)``.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .geometry import AlphaConfig, BodyTriangulator, TriangulatedBody, corner_geometry
from .kinematics import MeshSequence
from .scene import SceneConfig

ORIGINS = ("synthetic", "measured")
RECORDING_MAGIC = b"WGRC"
RECORDING_VERSION = 1
HPR_RADIUS_FACTOR = 100.0
MIN_SIM_FPS = 250.0


@dataclass(frozen=True)
class ScatteringParams:
    alpha: float = 0.1
    beta: float = 1.0
    m: float = 8.0
    phase_policy: str = "per-surface-per-walk"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if self.phase_policy != "per-surface-per-walk":
            raise ValueError(f"unsupported phase policy {self.phase_policy!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ChannelRecording:
    """Complex baseband streams, shape (streams, samples)."""

    streams: np.ndarray
    sample_rate: float
    wavelength: float
    origin: str = "synthetic"
    layout: tuple[int, int] = (1, 1)
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        streams = np.array(self.streams, dtype=np.complex128)
        if streams.ndim == 1:
            streams = streams[None, :]
        if streams.ndim != 2:
            raise ValueError("streams must be a (streams, samples) array")
        streams.setflags(write=False)
        object.__setattr__(self, "streams", streams)
        object.__setattr__(self, "layout", tuple(int(v) for v in self.layout))
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        if not self.wavelength > 0:
            raise ValueError("wavelength must be positive")
        if self.origin not in ORIGINS:
            raise ValueError(f"origin must be one of {ORIGINS}")
        if self.layout[0] * self.layout[1] != streams.shape[0]:
            raise ValueError(f"layout {self.layout} does not match {streams.shape[0]} streams")
        if self.origin == "synthetic" and streams.shape[0] != 1:
            raise ValueError("synthetic recordings carry exactly one stream")

    @property
    def n_samples(self) -> int:
        return self.streams.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    def __eq__(self, other):
        if not isinstance(other, ChannelRecording):
            return NotImplemented
        return (
            self.sample_rate == other.sample_rate
            and self.wavelength == other.wavelength
            and self.origin == other.origin
            and self.layout == other.layout
            and np.array_equal(self.streams, other.streams)
        )

    __hash__ = None


# -- elementary model pieces ----------------------------------------------------

def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def specular_vector(x_inc: np.ndarray, n: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    """Mirror ``x_inc`` about the plane with unit normal ``n``."""
    x_inc = np.asarray(x_inc, dtype=float)
    n = np.asarray(n, dtype=float)
    for name, v in (("x_inc", x_inc), ("n", n)):
        if np.any(np.abs(np.linalg.norm(v, axis=-1) - 1) > atol):
            raise ValueError(f"{name} must be a unit vector")
    dot = np.sum(x_inc * n, axis=-1, keepdims=True)
    return x_inc - 2 * dot * n


def greens(p1, p2, wavelength: float):
    """Free-space Green's function ``exp(j 2 pi d / lam) / (4 pi d)``."""
    d = np.linalg.norm(np.asarray(p1, dtype=float) - np.asarray(p2, dtype=float), axis=-1)
    if np.any(d == 0):
        raise ValueError("Green's function undefined for coincident points")
    return np.exp(2j * np.pi * d / wavelength) / (4 * np.pi * d)


def _geometry_terms(centers, normals, tx, rx):
    to_c = centers - tx
    d_tx = np.sqrt(np.einsum("ij,ij->i", to_c, to_c))
    x_inc = to_c / d_tx[:, None]
    to_rx = rx - centers
    d_rx = np.sqrt(np.einsum("ij,ij->i", to_rx, to_rx))
    x_rx = to_rx / d_rx[:, None]
    inc_dot = np.einsum("ij,ij->i", x_inc, normals)
    rx_dot = np.einsum("ij,ij->i", x_rx, normals)
    return d_tx, d_rx, x_inc, x_rx, inc_dot, rx_dot


def _coefficients(areas, normals, x_inc, x_rx, inc_dot, phases, p: ScatteringParams):
    cos_inc = -inc_dot
    x_spec = x_inc - 2 * inc_dot[:, None] * normals
    cos_i = np.einsum("ij,ij->i", x_rx, x_spec)
    lobe = np.maximum(cos_i, 0.0) ** p.m
    return np.sqrt(areas * cos_inc) * (p.alpha * np.exp(1j * phases) + p.beta * lobe)


def scattering_coefficient(s, tx, rx, p: ScatteringParams, phase: float) -> complex:
    """Quasi-specular Lambertian coefficient of one sub-surface."""
    tx, rx = np.asarray(tx, float), np.asarray(rx, float)
    c, n = np.asarray(s.center, float)[None], np.asarray(s.normal, float)[None]
    _, _, x_inc, x_rx, inc_dot, _ = _geometry_terms(c, n, tx, rx)
    if not -inc_dot[0] > 0:
        raise ValueError("surface does not face the transmitter (cos theta_inc <= 0)")
    return complex(_coefficients(np.array([s.area]), n, x_inc, x_rx, inc_dot, np.array([phase]), p)[0])


def hidden_point_removal(points: np.ndarray, viewpoint: np.ndarray, radius: float) -> np.ndarray:
    """Boolean visibility mask by spherical flipping and a convex hull.

    Points are mirrored through a sphere of the given radius centred on the
    viewpoint; points whose images lie on the convex hull of the images plus
    the viewpoint are visible. With fewer than four points nothing can be
    occluded and all are reported visible.
    """
    n = len(points)
    if n < 4:
        return np.ones(n, dtype=bool)
    p = points - viewpoint
    norm = np.sqrt(np.einsum("ij,ij->i", p, p))
    if np.any(norm >= radius):
        raise ValueError("inversion radius must exceed every point distance")
    flipped = p + 2 * (radius - norm)[:, None] * p / norm[:, None]
    try:
        hull = ConvexHull(np.vstack([flipped, np.zeros((1, 3))]))
    except QhullError:
        return np.ones(n, dtype=bool)
    mask = np.zeros(n + 1, dtype=bool)
    mask[hull.vertices] = True
    return mask[:n]


def _hpr_radius(centers, tx, rx) -> float:
    pts = np.vstack([centers, tx[None], rx[None]])
    diameter = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    return HPR_RADIUS_FACTOR * diameter


def occlusion_mask(centers, tx, rx) -> np.ndarray:
    if len(centers) == 0:
        return np.zeros(0, dtype=bool)
    radius = _hpr_radius(centers, tx, rx)
    return hidden_point_removal(centers, tx, radius) & hidden_point_removal(centers, rx, radius)


def facing_mask(centers, normals, tx, rx) -> np.ndarray:
    _, _, _, _, inc_dot, rx_dot = _geometry_terms(centers, normals, tx, rx)
    return ~((inc_dot > 0) | (-rx_dot > 0))


def visible_set(body: TriangulatedBody, tx, rx) -> np.ndarray:
    """Indices of sub-surfaces visible to both transceivers."""
    tx, rx = np.asarray(tx, float), np.asarray(rx, float)
    mask = occlusion_mask(body.centers, tx, rx) & facing_mask(body.centers, body.normals, tx, rx)
    return np.flatnonzero(mask)


def _born_sum(centers, normals, areas, phases, tx, rx, wavelength, p, mask=None) -> complex:
    if mask is not None:
        centers, normals, areas, phases = centers[mask], normals[mask], areas[mask], phases[mask]
    direct = complex(greens(tx, rx, wavelength))
    if len(areas) == 0:
        return direct
    d_tx, d_rx, x_inc, x_rx, inc_dot, _ = _geometry_terms(centers, normals, tx, rx)
    r = _coefficients(areas, normals, x_inc, x_rx, inc_dot, phases, p)
    k = 2 * np.pi / wavelength
    prop = np.exp(1j * k * (d_tx + d_rx)) / (16 * np.pi**2 * d_tx * d_rx)
    return direct + complex(np.sum(prop * r))


def scattered_terms(body: TriangulatedBody, scene: SceneConfig, p: ScatteringParams, phases) -> np.ndarray:
    """Per-surface single-bounce contributions, zero for invisible surfaces."""
    phases = np.asarray(phases, dtype=float)
    out = np.zeros(len(body), dtype=complex)
    idx = visible_set(body, scene.tx, scene.rx)
    if len(idx) == 0:
        return out
    c, n = body.centers[idx], body.normals[idx]
    _, _, x_inc, x_rx, inc_dot, _ = _geometry_terms(c, n, scene.tx, scene.rx)
    r = _coefficients(body.areas[idx], n, x_inc, x_rx, inc_dot, phases[idx], p)
    out[idx] = greens(scene.tx, c, scene.wavelength) * r * greens(c, scene.rx, scene.wavelength)
    return out


def simulate_frame(body: TriangulatedBody, scene: SceneConfig, p: ScatteringParams, phases) -> complex:
    """Received sample for one body snapshot."""
    phases = np.asarray(phases, dtype=float)
    if len(phases) != len(body):
        raise ValueError(f"{len(phases)} phases for {len(body)} surfaces")
    if len(body) == 0:
        return complex(greens(scene.tx, scene.rx, scene.wavelength))
    mask = np.zeros(len(body), dtype=bool)
    mask[visible_set(body, scene.tx, scene.rx)] = True
    return _born_sum(body.centers, body.normals, body.areas, phases, scene.tx, scene.rx, scene.wavelength, p, mask)


# -- whole walks ----------------------------------------------------------------

def _surface_keys(body: TriangulatedBody) -> np.ndarray:
    """Stable integer key per triangle: part id and its sorted vertex triple."""
    from .kinematics import PART_IDS

    part_codes = np.array([PART_IDS.index(p) for p in body.part_ids], dtype=np.int64)
    v = np.sort(body.vertices.astype(np.int64), axis=1)
    return (part_codes[body.part_index] << 48) | (v[:, 0] << 32) | (v[:, 1] << 16) | v[:, 2]


class PhaseTable:
    """Random phase per sub-surface, drawn once per walk.

    Triangles are identified by part and vertex triple; keys seen for the
    first time in a frame get phases from the seeded stream in ascending key
    order, so the table depends only on the seed and the frame sequence.
    """

    def __init__(self, seed: int):
        self._rng = np.random.default_rng(seed)
        self._keys = np.zeros(0, dtype=np.int64)  # sorted
        self._phases = np.zeros(0)

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        pos = np.searchsorted(self._keys, keys)
        known = (pos < len(self._keys)) & (self._keys[np.minimum(pos, len(self._keys) - 1)] == keys) \
            if len(self._keys) else np.zeros(len(keys), dtype=bool)
        if not known.all():
            new = np.unique(keys[~known])
            draws = self._rng.uniform(0.0, 2 * np.pi, size=len(new))
            keys_all = np.concatenate([self._keys, new])
            order = np.argsort(keys_all, kind="stable")
            self._keys = keys_all[order]
            self._phases = np.concatenate([self._phases, draws])[order]
            pos = np.searchsorted(self._keys, keys)
        return self._phases[pos]

    def __len__(self) -> int:
        return len(self._keys)


def _packet_times(t0: float, t1: float, rate: float) -> np.ndarray:
    n = int(math.floor((t1 - t0) * rate + 1e-9)) + 1
    return t0 + np.arange(n) / rate


def _frame_corners(frame, body: TriangulatedBody) -> np.ndarray:
    """Triangle corner coordinates (n, 3, 3) of ``body``'s topology on ``frame``'s points."""
    if len(body) == 0:
        return np.zeros((0, 3, 3))
    pts = [np.asarray(frame.parts[p]) for p in body.part_ids]
    offsets = np.cumsum([0] + [len(q) for q in pts[:-1]])
    flat = np.concatenate(pts)
    return flat[offsets[body.part_index][:, None] + body.vertices]


def _walk_snapshots(seq: MeshSequence, alpha_cfg: AlphaConfig | None, seed: int, rate: float):
    """Per mesh frame: packet indices it covers, its body, corner arrays and interpolation weights."""
    triangulate = BodyTriangulator(alpha_cfg)
    phases = PhaseTable(seed)
    times = seq.timestamps
    tq = _packet_times(times[0], times[-1], rate)
    frame_of = np.clip(np.searchsorted(times, tq, side="right") - 1, 0, len(times) - 1)
    for k, frame in enumerate(seq.frames):
        sel = np.flatnonzero(frame_of == k)
        if len(sel) == 0:
            continue
        body = triangulate(frame)
        ph = phases.lookup(_surface_keys(body))
        c0 = _frame_corners(frame, body)
        if k + 1 < len(seq.frames):
            c1 = _frame_corners(seq.frames[k + 1], body)
            u = (tq[sel] - times[k]) / (times[k + 1] - times[k])
        else:
            c1 = c0
            u = np.zeros(len(sel))
        yield sel, body, c0, c1, u, ph


def _snapshot_geometry(body, c0, c1, w):
    if w == 0:
        return body.centers, body.normals, body.areas
    corners = (1 - w) * c0 + w * c1
    return corner_geometry(corners[:, 0], corners[:, 1], corners[:, 2])


def _check_walk(seq: MeshSequence):
    if seq.units != "meter":
        raise ValueError("simulate_walk needs a meter-unit sequence")
    if seq.fps < MIN_SIM_FPS * (1 - 1e-9):
        raise ValueError(f"sequence fps {seq.fps} is below {MIN_SIM_FPS}; resample first")


def _walk_series(seq, scene, p, seed, alpha_cfg, rxs) -> np.ndarray:
    """Born-sum series (len(rxs), packets) at the carrier wavelength."""
    tx, lam = scene.tx, scene.wavelength
    k = 2 * np.pi / lam
    n = len(_packet_times(seq.timestamps[0], seq.timestamps[-1], scene.packet_rate))
    out = np.empty((len(rxs), n), dtype=complex)
    direct = [complex(greens(tx, r, lam)) for r in rxs]
    for sel, body, c0, c1, u, ph in _walk_snapshots(seq, alpha_cfg, seed, scene.packet_rate):
        if len(body) == 0:
            out[:, sel] = np.asarray(direct)[:, None]
            continue
        occ = occlusion_mask(body.centers, tx, scene.rx)
        for j, w in zip(sel, u):
            centers, normals, areas = _snapshot_geometry(body, c0, c1, w)
            to_c = centers - tx
            d_tx = np.sqrt(np.einsum("ij,ij->i", to_c, to_c))
            x_inc = to_c / d_tx[:, None]
            inc_dot = np.einsum("ij,ij->i", x_inc, normals)
            x_spec = x_inc - 2 * inc_dot[:, None] * normals
            front = occ & (inc_dot <= 0)
            for a, rx in enumerate(rxs):
                to_rx = rx - centers
                d_rx = np.sqrt(np.einsum("ij,ij->i", to_rx, to_rx))
                rx_dot = np.einsum("ij,ij->i", to_rx, normals) / d_rx
                m = front & (rx_dot >= 0)
                if not m.any():
                    out[a, j] = direct[a]
                    continue
                cos_i = np.einsum("ij,ij->i", to_rx[m], x_spec[m]) / d_rx[m]
                lobe = np.maximum(cos_i, 0.0) ** p.m
                r = np.sqrt(areas[m] * -inc_dot[m]) * (p.alpha * np.exp(1j * ph[m]) + p.beta * lobe)
                dd = d_tx[m] * d_rx[m]
                out[a, j] = direct[a] + np.sum(np.exp(1j * k * (d_tx[m] + d_rx[m])) * r / dd) / (16 * np.pi**2)
    return out


def simulate_walk(
    seq: MeshSequence,
    scene: SceneConfig,
    p: ScatteringParams,
    seed: int,
    alpha_cfg: AlphaConfig | None = None,
) -> ChannelRecording:
    """Single-stream recording of a walk sampled at ``scene.packet_rate``.

    Every mesh frame is triangulated once and its occlusion test is run
    once. Packet instants between two frames reuse the earlier frame's
    triangles with vertices linearly interpolated towards the next frame;
    only the back-facing test is re-evaluated per packet.
    """
    _check_walk(seq)
    out = _walk_series(seq, scene, p, seed, alpha_cfg, [scene.rx])
    return ChannelRecording(
        streams=out,
        sample_rate=scene.packet_rate,
        wavelength=scene.wavelength,
        origin="synthetic",
        layout=(1, 1),
        provenance={
            "seed": int(seed),
            "scene": scene.to_dict(),
            "scattering": p.to_dict(),
            "subject_id": seq.subject_id,
            "label": seq.label,
            "condition": seq.condition,
        },
    )


@dataclass(frozen=True)
class CsiEmulation:
    """Knobs of the multi-antenna, multi-subcarrier capture emulator."""

    antennas: int = 3
    subcarriers: int = 30
    antenna_spacing: float = 0.5  # wavelengths, along the link axis
    clutter_level: float = 0.3  # static multipath relative to the direct path
    noise_level: float = 2e-4  # complex AWGN std relative to the direct path
    gain_jitter_db: float = 1.0


def simulate_csi_walk(
    seq: MeshSequence,
    scene: SceneConfig,
    p: ScatteringParams,
    seed: int,
    alpha_cfg: AlphaConfig | None = None,
    emu: CsiEmulation | None = None,
) -> ChannelRecording:
    """Emulate an antennas x subcarriers CSI capture of a walk (origin ``measured``).

    The body channel is simulated exactly for each receive antenna, which
    are spaced along the link axis. Subcarriers of one antenna share that
    channel up to a static per-subcarrier complex gain, and each stream gets
    its own static clutter phasor and white noise. The streams therefore
    need DC removal and denoising before Doppler analysis, as real captures
    do.
    """
    _check_walk(seq)
    emu = emu or CsiEmulation()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5C1]))
    axis = scene.rx - scene.tx
    axis = axis / np.linalg.norm(axis)
    ant = (np.arange(emu.antennas) - (emu.antennas - 1) / 2) * emu.antenna_spacing * scene.wavelength
    rxs = [scene.rx + a * axis for a in ant]
    body = _walk_series(seq, scene, p, seed, alpha_cfg, rxs)

    shape = (emu.antennas, emu.subcarriers, 1)
    ref = np.abs(body).mean(axis=1)[:, None, None]
    gain = 10 ** (rng.normal(0, emu.gain_jitter_db, shape) / 20) * np.exp(1j * rng.uniform(0, 2 * np.pi, shape))
    clutter = emu.clutter_level * ref * np.exp(1j * rng.uniform(0, 2 * np.pi, shape))
    out_shape = (emu.antennas, emu.subcarriers, body.shape[1])
    noise = emu.noise_level * ref * (rng.normal(size=out_shape) + 1j * rng.normal(size=out_shape)) / np.sqrt(2)
    streams = gain * (body[:, None, :] + clutter) + noise
    return ChannelRecording(
        streams=streams.reshape(emu.antennas * emu.subcarriers, -1),
        sample_rate=scene.packet_rate,
        wavelength=scene.wavelength,
        origin="measured",
        layout=(emu.antennas, emu.subcarriers),
        provenance={
            "seed": int(seed),
            "scene": scene.to_dict(),
            "scattering": p.to_dict(),
            "emulation": asdict(emu),
            "subject_id": seq.subject_id,
            "label": seq.label,
            "condition": seq.condition,
        },
    )


def recording_from_csi(csi, sample_rate: float, wavelength: float, provenance: dict | None = None) -> ChannelRecording:
    """Wrap parsed CSI of shape (packets, antennas, subcarriers) as a measured recording.

    This is the entry point for real captures: a capture tool's own parser
    produces the complex array, and this packs it into the portable
    container with streams ordered antenna-major (antenna, subcarrier).
    """
    csi = np.asarray(csi)
    if csi.ndim != 3:
        raise ValueError(f"expected (packets, antennas, subcarriers), got shape {csi.shape}")
    n, a, k = csi.shape
    streams = np.ascontiguousarray(np.transpose(csi, (1, 2, 0)).reshape(a * k, n), dtype=complex)
    return ChannelRecording(
        streams=streams, sample_rate=sample_rate, wavelength=wavelength, origin="measured",
        layout=(a, k), provenance=dict(provenance or {}),
    )


# -- serialization ----------------------------------------------------------------

_HEADER = struct.Struct("<4sHBxddIIIQ")


def write_recording(rec: ChannelRecording, path: str | Path, sidecar: bool = True) -> Path:
    """Binary container: fixed header then each stream as interleaved little-endian f8 pairs.

    Header layout (little-endian): magic ``WGRC``, u16 version, u8 origin
    (0 synthetic, 1 measured), pad byte, f8 sample rate, f8 wavelength,
    u32 stream count, u32 antennas, u32 subcarriers, u64 samples per stream.
    A JSON sidecar ``<path>.json`` carries the provenance.
    """
    path = Path(path)
    header = _HEADER.pack(
        RECORDING_MAGIC, RECORDING_VERSION, ORIGINS.index(rec.origin),
        rec.sample_rate, rec.wavelength, rec.streams.shape[0], rec.layout[0], rec.layout[1], rec.n_samples,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(rec.streams, dtype="<c16").tobytes())
    if sidecar:
        side = path.with_name(path.name + ".json")
        side.write_text(json.dumps(rec.provenance, indent=2, sort_keys=True))
    return path


def read_recording(path: str | Path) -> ChannelRecording:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated recording header")
    magic, version, origin, rate, lam, n_streams, n_ant, n_sub, n_samp = _HEADER.unpack_from(raw)
    if magic != RECORDING_MAGIC:
        raise ValueError(f"{path}: not a recording file")
    if version != RECORDING_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 16 * n_streams * n_samp
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<c16", offset=_HEADER.size).reshape(n_streams, n_samp)
    side = path.with_name(path.name + ".json")
    provenance = json.loads(side.read_text()) if side.exists() else {}
    return ChannelRecording(
        streams=data.astype(np.complex128), sample_rate=rate, wavelength=lam,
        origin=ORIGINS[origin], layout=(n_ant, n_sub), provenance=provenance,
    )
