"""The six gait features, from Doppler spectrograms or from mesh keypoints.

Features, in vector order: average, 10th-percentile and 90th-percentile
torso speed (m/s), gait cycle (s), step length (m) and speed variation (m/s).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal, stats

from .dsp import Spectrogram, crop_central
from .kinematics import MeshSequence, crop_frames
from .scene import SceneConfig

FEATURE_NAMES = ("avg_speed", "min_speed", "max_speed", "gait_cycle", "step_length", "speed_variation")
META_NAMES = ("sample_id", "subject_id", "label", "condition", "modality")
MODALITIES = ("rf", "video")

MIN_PEAK_LAG = 0.3  # s
MAX_STEP_LAG = 2.0  # s, longest step period searched for
PEAK_FRACTION = 0.1  # of the zero-lag autocorrelation
PEAK_SIGNIFICANCE = 0.05
HARMONIC_TOLERANCE = 0.9
FOOT_CUTOFF_HZ = 4.0
FOOT_EXTREMA_GAP = 0.25  # s
FOOT_MIN_PROMINENCE = 0.005  # m


@dataclass(frozen=True)
class TorsoSpeedCurve:
    speeds: np.ndarray
    time_step: float
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.array(self.speeds, dtype=float)
        if v.ndim != 1 or len(v) == 0:
            raise ValueError("speed curve must be a non-empty 1-D array")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("speeds must be finite and non-negative")
        if not self.time_step > 0:
            raise ValueError("time_step must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "speeds", v)

    @property
    def duration(self) -> float:
        return len(self.speeds) * self.time_step


@dataclass(frozen=True)
class GaitFeatureVector:
    avg_speed: float
    min_speed: float
    max_speed: float
    gait_cycle: float
    step_length: float
    speed_variation: float
    subject_id: str = ""
    sample_id: str = ""
    label: str = "unknown"
    condition: str = ""
    modality: str = "rf"
    flags: tuple[str, ...] = field(default=())

    def __post_init__(self):
        values = self.values()
        if not np.all(np.isfinite(values)):
            raise ValueError("features must be finite")
        if not self.min_speed <= self.avg_speed <= self.max_speed:
            raise ValueError("expected min_speed <= avg_speed <= max_speed")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")

    def values(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FEATURE_NAMES], dtype=float)

    @property
    def cycle_missing(self) -> bool:
        return "cycle_missing" in self.flags

    def with_meta(self, **kw) -> "GaitFeatureVector":
        d = {n: getattr(self, n) for n in FEATURE_NAMES + META_NAMES + ("flags",)}
        d.update(kw)
        return GaitFeatureVector(**d)


def percentile(x, q: float) -> float:
    """Inclusive linear-interpolation percentile, ``q`` in [0, 100]."""
    return float(np.percentile(np.asarray(x, dtype=float), q, method="linear"))


# -- band tracking ------------------------------------------------------------------

def _shortest_window(col: np.ndarray) -> tuple[int, int]:
    """Shortest [lo, hi] bin window holding more than half the mass; lowest start wins ties."""
    p = np.concatenate([[0.0], np.cumsum(col)])
    half = 0.5 * p[-1]
    # for each start i the first end j with p[j + 1] - p[i] > half
    ends = np.searchsorted(p, p[:-1] + half, side="right") - 1
    valid = ends < len(col)
    lengths = np.where(valid, ends - np.arange(len(col)), len(col) + 1)
    lo = int(np.argmin(lengths))
    return lo, int(ends[lo])


def band_bins(mags: np.ndarray, lo_limit=None, hi_limit=None):
    """Per-frame shortest >50% window as bin indices, optionally within per-frame limits.

    Returns ``(lo, hi, zero)`` where ``zero`` marks frames with no mass
    (band reported as [limit, limit]).
    """
    mags = np.asarray(mags, dtype=float)
    n, f = mags.shape
    lo_limit = np.zeros(n, dtype=int) if lo_limit is None else np.asarray(lo_limit, dtype=int)
    hi_limit = np.full(n, f - 1) if hi_limit is None else np.asarray(hi_limit, dtype=int)
    lo = np.empty(n, dtype=int)
    hi = np.empty(n, dtype=int)
    zero = np.zeros(n, dtype=bool)
    for t in range(n):
        a, b = lo_limit[t], hi_limit[t]
        col = mags[t, a:b + 1]
        if not col.sum() > 0:
            lo[t] = hi[t] = a
            zero[t] = True
            continue
        i, j = _shortest_window(col)
        lo[t], hi[t] = a + i, a + j
    return lo, hi, zero


def torso_band(sg: Spectrogram):
    """Lower and upper band edges in Hz per time frame, plus a zero-frame mask."""
    if sg.n_frames == 0:
        raise ValueError("empty spectrogram")
    lo, hi, zero = band_bins(sg.magnitudes)
    return sg.freqs[lo], sg.freqs[hi], zero


# -- curve cleaning -----------------------------------------------------------------

def gesd_critical(n: int, i: int, alpha: float) -> float:
    """Rosner's critical value for the i-th (1-based) extreme of an n-point sample."""
    p = 1 - alpha / (2 * (n - i + 1))
    t = stats.t.ppf(p, n - i - 1)
    return (n - i) * t / math.sqrt((n - i - 1 + t**2) * (n - i + 1))


def gesd_outliers(x, alpha: float = 0.05, max_outliers: int | None = None) -> np.ndarray:
    """Indices flagged by the generalized extreme studentized deviate test."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    r = max(1, n // 10) if max_outliers is None else int(max_outliers)
    if n <= 2 * r:
        raise ValueError(f"curve of length {n} is too short for {r} outliers")
    idx = np.arange(n)
    vals = x.copy()
    removed = []
    n_out = 0
    for i in range(1, r + 1):
        sd = vals.std(ddof=1)
        if not sd > 0:
            break
        dev = np.abs(vals - vals.mean())
        k = int(np.argmax(dev))
        if dev[k] / sd > gesd_critical(n, i, alpha):
            n_out = i
        removed.append(idx[k])
        idx = np.delete(idx, k)
        vals = np.delete(vals, k)
    return np.sort(np.array(removed[:n_out], dtype=int))


def gesd_filter(curve, significance: float = 0.05, max_outliers: int | None = None) -> np.ndarray:
    """Replace GESD outliers by linear interpolation between the kept neighbours."""
    x = np.asarray(curve, dtype=float)
    out = gesd_outliers(x, significance, max_outliers)
    if len(out) == 0:
        return x.copy()
    keep = np.setdiff1d(np.arange(len(x)), out)
    y = x.copy()
    y[out] = np.interp(out, keep, x[keep])
    return y


def smooth(curve, span: int = 4) -> np.ndarray:
    """Trailing moving average; the first ``span - 1`` samples average the available prefix."""
    x = np.asarray(curve, dtype=float)
    if len(x) < span:
        raise ValueError(f"curve shorter than the smoothing span {span}")
    c = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(len(x))
    start = np.maximum(0, i - span + 1)
    return (c[i + 1] - c[start]) / (i + 1 - start)


# -- torso speed and gait cycle ---------------------------------------------------------

def _to_bins(freqs_hz: np.ndarray, df: float, n_bins: int) -> np.ndarray:
    return np.clip(np.round(freqs_hz / df).astype(int), 0, n_bins - 1)


def torso_speed(sg: Spectrogram, scene: SceneConfig, significance: float = 0.05) -> TorsoSpeedCurve:
    """Torso speed from the spectrogram's dominant band, ``v = f * lambda / psi``.

    The band edges are outlier-filtered and smoothed, the 50% window is
    searched again inside the smoothed band and the mean of its edges is
    taken as the torso Doppler frequency.
    """
    lo_hz, hi_hz, zero = torso_band(sg)
    flags = []
    if zero.all():
        return TorsoSpeedCurve(np.zeros(sg.n_frames), sg.time_step, ("degenerate",))
    if zero.any():
        flags.append("zero_frames")
    lo_s = smooth(gesd_filter(lo_hz, significance))
    hi_s = smooth(gesd_filter(hi_hz, significance))
    n_bins = sg.magnitudes.shape[1]
    df = sg.freq_step
    a = _to_bins(np.minimum(lo_s, hi_s), df, n_bins)
    b = _to_bins(np.maximum(lo_s, hi_s), df, n_bins)
    lo2, hi2, _ = band_bins(sg.magnitudes, a, b)
    f = 0.5 * (sg.freqs[lo2] + sg.freqs[hi2])
    return TorsoSpeedCurve(f * scene.wavelength / scene.psi(), sg.time_step, tuple(flags))


def autocorrelation(x) -> np.ndarray:
    """Unbiased autocorrelation of the mean-removed series, lags 0..N-1."""
    x = np.asarray(x, dtype=float)
    x = x - x.mean()
    n = len(x)
    full = signal.correlate(x, x, mode="full", method="fft")[n - 1:]
    return full / (n - np.arange(n))


def step_lag(curve: TorsoSpeedCurve, significance: float = PEAK_SIGNIFICANCE) -> float | None:
    """Dominant step period in seconds, or None when no credible peak exists.

    Candidates are autocorrelation maxima at lags of at least 0.3 s and at
    least 0.3 s apart, searched up to half the curve or 2 s. A candidate
    must reach a tenth of the zero-lag value and clear a white-noise bound
    ``z / sqrt(N - k)`` (Bonferroni over the searched lags). Among the
    survivors the earliest one within 90% of the highest is taken, which
    keeps multiples of the period from winning on noise. The lag is refined
    by a parabola through the peak and its neighbours.
    """
    v = curve.speeds
    n = len(v)
    r = autocorrelation(v)
    if not r[0] > 1e-12 * max(1.0, float(np.mean(v**2))):
        return None
    rho = r / r[0]
    dt = curve.time_step
    k_min = int(math.ceil(MIN_PEAK_LAG / dt - 1e-9))
    k_max = min(n // 2, int(round(MAX_STEP_LAG / dt)))
    if k_max <= k_min:
        return None
    dist = max(1, int(math.ceil(MIN_PEAK_LAG / dt - 1e-9)))
    peaks, _ = signal.find_peaks(rho[: k_max + 2], distance=dist)
    peaks = peaks[(peaks >= k_min) & (peaks <= k_max)]
    if len(peaks) == 0:
        return None
    z = stats.norm.ppf(1 - significance / (k_max - k_min + 1))
    ok = (rho[peaks] >= PEAK_FRACTION) & (rho[peaks] > z / np.sqrt(n - peaks))
    peaks = peaks[ok]
    if len(peaks) == 0:
        return None
    best = rho[peaks].max()
    k = int(peaks[np.argmax(rho[peaks] >= HARMONIC_TOLERANCE * best)])
    y0, y1, y2 = rho[k - 1], rho[k], rho[k + 1]
    denom = y0 - 2 * y1 + y2
    shift = 0.5 * (y0 - y2) / denom if denom < 0 else 0.0
    return (k + float(np.clip(shift, -0.5, 0.5))) * dt


def gait_cycle(curve: TorsoSpeedCurve, significance: float = PEAK_SIGNIFICANCE) -> float | None:
    """Gait cycle in seconds (twice the dominant step lag), None when missing."""
    lag = step_lag(curve, significance)
    return None if lag is None else 2 * lag


def assemble_features(curve: TorsoSpeedCurve, cycle: float | None, **meta) -> GaitFeatureVector:
    """Six-feature vector from a speed curve and gait cycle.

    Speed variation averages (p90 - p10) over consecutive half-cycle
    chunks; a trailing partial chunk is ignored. Without a cycle the gait
    cycle and step length are reported as 0 and the variation is taken over
    the whole curve; ``cycle_missing`` is flagged.
    """
    v = curve.speeds
    flags = list(curve.flags) + list(meta.pop("flags", ()))
    avg = float(np.mean(v))
    lo = percentile(v, 10)
    hi = percentile(v, 90)
    avg = min(max(avg, lo), hi)  # guards rounding on constant curves
    if cycle is None:
        flags.append("cycle_missing")
        cycle_val, step, variation = 0.0, 0.0, hi - lo
    else:
        cycle_val = float(cycle)
        step = 0.5 * cycle_val * avg
        chunk = max(1, int(round(0.5 * cycle_val / curve.time_step)))
        spans = [v[i:i + chunk] for i in range(0, len(v) - chunk + 1, chunk)]
        if spans:
            variation = float(np.mean([percentile(s, 90) - percentile(s, 10) for s in spans]))
        else:
            variation = hi - lo
    return GaitFeatureVector(
        avg_speed=avg, min_speed=lo, max_speed=hi, gait_cycle=cycle_val,
        step_length=step, speed_variation=variation, flags=tuple(dict.fromkeys(flags)), **meta,
    )


def extract_rf_features(sg: Spectrogram, scene: SceneConfig, fraction: float = 0.5, **meta) -> GaitFeatureVector:
    curve = torso_speed(crop_central(sg, fraction), scene)
    return assemble_features(curve, gait_cycle(curve), modality="rf", **meta)


# -- video path -----------------------------------------------------------------------

def _foot_cycle(z: np.ndarray, fps: float) -> float | None:
    """Mean same-type extremum spacing of a low-passed foot-height curve."""
    if len(z) < 16 or not np.all(np.isfinite(z)):
        return None
    nyq = 0.5 * fps
    if FOOT_CUTOFF_HZ < nyq:
        sos = signal.butter(4, FOOT_CUTOFF_HZ / nyq, output="sos")
        z = signal.sosfiltfilt(sos, z)
    gap = max(1, int(round(FOOT_EXTREMA_GAP * fps)))
    prom = max(FOOT_MIN_PROMINENCE, 0.2 * (z.max() - z.min()))
    periods = []
    for sgn in (1, -1):
        peaks, _ = signal.find_peaks(sgn * z, distance=gap, prominence=prom)
        if len(peaks) >= 2:
            periods.append(np.mean(np.diff(peaks)) / fps)
    return float(np.mean(periods)) if periods else None


def extract_video_features(seq: MeshSequence, fraction: float = 0.5, **meta) -> GaitFeatureVector:
    """Features from keypoint tracks of a meter-aligned sequence.

    The torso speed is the horizontal displacement of the torso keypoint
    between frames. Each foot's height is low-passed below 4 Hz and the
    cycle is the mean spacing of its maxima and of its minima; the two feet
    are averaged, or one foot is used when the other fails.
    """
    if seq.units != "meter":
        raise ValueError("video features need a meter-aligned sequence")
    mid = crop_frames(seq, fraction)
    fps = mid.fps
    torso = mid.keypoints("torso")
    if len(torso) < 2 or not np.all(np.isfinite(torso)):
        raise ValueError("torso keypoint track is missing or too short")
    speeds = np.linalg.norm(np.diff(torso[:, :2], axis=0), axis=1) * fps
    curve = TorsoSpeedCurve(speeds, 1.0 / fps)
    flags = []
    cycles = {}
    for side in ("left", "right"):
        c = _foot_cycle(mid.keypoints(f"{side}_foot")[:, 2], fps)
        if c is not None:
            cycles[side] = c
    if len(cycles) == 1:
        flags.append("single_foot")
    cycle = float(np.mean(list(cycles.values()))) if cycles else None
    meta.setdefault("subject_id", seq.subject_id)
    meta.setdefault("label", seq.label)
    meta.setdefault("condition", seq.condition)
    return assemble_features(curve, cycle, modality="video", flags=flags, **meta)


# -- feature table ----------------------------------------------------------------------

TABLE_COLUMNS = META_NAMES + FEATURE_NAMES + ("flags",)


def write_feature_table(rows, path: str | Path) -> Path:
    """Comma-separated table, header row ``TABLE_COLUMNS``; floats in shortest round-trip form."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in rows:
            w.writerow(
                [getattr(r, n) for n in META_NAMES]
                + [repr(float(getattr(r, n))) for n in FEATURE_NAMES]
                + [";".join(r.flags)]
            )
    return path


def read_feature_table(path: str | Path) -> list[GaitFeatureVector]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TABLE_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        out = []
        for row in reader:
            out.append(GaitFeatureVector(
                **{n: float(row[n]) for n in FEATURE_NAMES},
                **{n: row[n] for n in META_NAMES},
                flags=tuple(f for f in row["flags"].split(";") if f),
            ))
    return out
