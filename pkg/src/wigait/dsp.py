"""Doppler spectrograms from channel recordings.

Streams are reduced to magnitudes, stripped of their static (DC) part and,
for multi-stream captures, denoised by PCA before a multitaper short-time
Fourier transform with discrete Hermite tapers.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rfsim import ChannelRecording

SPECTROGRAM_MAGIC = b"WGSG"
SPECTROGRAM_VERSION = 1
DEFAULT_WINDOW = 0.3
DEFAULT_SHIFT = 0.016
DEFAULT_TAPERS = 1
DEFAULT_PAD = 2
DEFAULT_COMPONENTS = 15


@dataclass(frozen=True)
class DspConfig:
    window: float = DEFAULT_WINDOW
    shift: float = DEFAULT_SHIFT
    tapers: int = DEFAULT_TAPERS
    pad: int = DEFAULT_PAD  # FFT length = pad * window samples
    components: int = DEFAULT_COMPONENTS

    def __post_init__(self):
        if not (self.window > 0 and self.shift > 0):
            raise ValueError("window and shift must be positive")
        if self.tapers < 1 or self.pad < 1 or self.components < 1:
            raise ValueError("tapers, pad and components must be at least 1")


@dataclass(frozen=True)
class Spectrogram:
    """Non-negative power, one row per time frame and one column per frequency bin.

    ``t0`` is the centre time of the first frame relative to the start of
    the recording.
    """

    magnitudes: np.ndarray
    time_step: float
    freqs: np.ndarray
    source_id: str = ""
    t0: float = 0.0

    def __post_init__(self):
        mags = np.array(self.magnitudes, dtype=float)
        freqs = np.array(self.freqs, dtype=float)
        if mags.ndim != 2:
            raise ValueError("magnitudes must be a (frames, bins) matrix")
        if mags.shape[1] != len(freqs):
            raise ValueError(f"{mags.shape[1]} columns but {len(freqs)} frequency bins")
        if np.any(mags < 0) or not np.all(np.isfinite(mags)):
            raise ValueError("magnitudes must be finite and non-negative")
        if not self.time_step > 0:
            raise ValueError("time_step must be positive")
        mags.setflags(write=False)
        freqs.setflags(write=False)
        object.__setattr__(self, "magnitudes", mags)
        object.__setattr__(self, "freqs", freqs)

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.time_step * np.arange(self.n_frames)

    @property
    def freq_step(self) -> float:
        return float(self.freqs[1] - self.freqs[0]) if len(self.freqs) > 1 else 0.0

    def __eq__(self, other):
        if not isinstance(other, Spectrogram):
            return NotImplemented
        return (
            self.time_step == other.time_step
            and self.t0 == other.t0
            and self.source_id == other.source_id
            and np.array_equal(self.freqs, other.freqs)
            and np.array_equal(self.magnitudes, other.magnitudes)
        )

    __hash__ = None


def dc_remove(stream) -> np.ndarray:
    x = np.asarray(stream, dtype=float)
    if x.size == 0:
        raise ValueError("empty stream")
    return x - x.mean(axis=-1, keepdims=True)


def pca_components(streams, n_components: int = DEFAULT_COMPONENTS):
    """Principal components of DC-removed streams, shape (streams, samples).

    Returns ``(components, explained_variance)`` where row i of
    ``components`` is the projection of the data onto the i-th unit
    eigenvector of the stream covariance. Each eigenvector's largest
    magnitude loading is made positive.
    """
    x = np.asarray(streams, dtype=float)
    if x.ndim != 2:
        raise ValueError("streams must be a (streams, samples) array")
    m, n = x.shape
    if m < n_components:
        raise ValueError(f"{m} streams; at least {n_components} are needed")
    data = x.T  # samples x streams
    _, s, vt = np.linalg.svd(data, full_matrices=False)
    idx = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(len(vt)), idx])
    signs[signs == 0] = 1
    vt = vt * signs[:, None]
    comps = (data @ vt[:n_components].T).T
    var = s**2 / max(n - 1, 1)
    return comps, var[:n_components]


def hermite_tapers(n: int, k: int) -> np.ndarray:
    """First ``k`` discrete Hermite functions on ``n`` samples, orthonormal rows.

    The continuous functions are evaluated with the normalized three-term
    recurrence on a grid scaled so the order ``k - 1`` function reaches
    the window edges, then orthonormalized by QR with a positive diagonal
    so that the row signs follow the continuous functions.
    """
    if n < 8:
        raise ValueError("window must cover at least 8 samples")
    if k < 1:
        raise ValueError("need at least one taper")
    sigma = n / (2 * math.sqrt(2 * k + 1))
    t = (np.arange(n) - (n - 1) / 2) / sigma
    h = np.empty((k, n))
    h[0] = np.pi ** -0.25 * np.exp(-t**2 / 2)
    if k > 1:
        h[1] = math.sqrt(2) * t * h[0]
    for j in range(2, k):
        h[j] = math.sqrt(2 / j) * t * h[j - 1] - math.sqrt((j - 1) / j) * h[j - 2]
    q, r = np.linalg.qr(h.T)
    q = q * np.sign(np.diag(r))[None, :]
    return q.T


def frame_count(n_samples: int, window: int, shift: int) -> int:
    if n_samples < window:
        raise ValueError(f"stream of {n_samples} samples is shorter than the {window}-sample window")
    return (n_samples - window) // shift + 1


def _samples(seconds: float, rate: float) -> int:
    return int(round(seconds * rate))


def hermite_stft(
    stream,
    sample_rate: float,
    window: float = DEFAULT_WINDOW,
    shift: float = DEFAULT_SHIFT,
    tapers: int = DEFAULT_TAPERS,
    pad: int = DEFAULT_PAD,
    source_id: str = "",
) -> Spectrogram:
    """One-sided multitaper spectrogram, ``mean_k |FFT(h_k * frame)|^2``."""
    x = np.asarray(stream, dtype=float)
    if x.ndim != 1:
        raise ValueError("stream must be one-dimensional")
    w = _samples(window, sample_rate)
    s = _samples(shift, sample_rate)
    if s < 1:
        raise ValueError("shift is shorter than one sample")
    h = hermite_tapers(w, tapers)
    n_frames = frame_count(len(x), w, s)
    frames = np.lib.stride_tricks.sliding_window_view(x, w)[::s][:n_frames]
    nfft = w * pad
    spec = np.zeros((n_frames, nfft // 2 + 1))
    for taper in h:
        f = np.fft.rfft(frames * taper, n=nfft, axis=1)
        spec += f.real**2 + f.imag**2
    spec /= len(h)
    return Spectrogram(
        magnitudes=spec,
        time_step=s / sample_rate,
        freqs=np.fft.rfftfreq(nfft, d=1 / sample_rate),
        source_id=source_id,
        t0=0.5 * w / sample_rate,
    )


def spectrogram_pipeline(rec: ChannelRecording, cfg: DspConfig | None = None, source_id: str = "") -> Spectrogram:
    """Averaged Doppler spectrogram of a recording.

    Synthetic recordings: magnitude, DC removal, multitaper STFT. Measured
    recordings: per-stream magnitude and DC removal, PCA, then the
    spectrograms of the leading components are summed and divided by the
    number of streams. With that normalization a capture of identical
    streams gives exactly the single-stream spectrogram.
    """
    cfg = cfg or DspConfig()
    mags = dc_remove(np.abs(rec.streams))
    kw = dict(window=cfg.window, shift=cfg.shift, tapers=cfg.tapers, pad=cfg.pad, source_id=source_id)
    if rec.origin == "synthetic":
        return hermite_stft(mags[0], rec.sample_rate, **kw)
    comps, _ = pca_components(mags, cfg.components)
    total = None
    for c in comps:
        sg = hermite_stft(c, rec.sample_rate, **kw)
        total = sg.magnitudes.copy() if total is None else total + sg.magnitudes
    return Spectrogram(total / mags.shape[0], sg.time_step, sg.freqs, source_id, sg.t0)


def crop_central(sg: Spectrogram, fraction: float = 0.5) -> Spectrogram:
    """Keep the middle ``ceil(fraction * T)`` frames; odd leftovers go to the end."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n = sg.n_frames
    keep = min(n, math.ceil(fraction * n - 1e-9))
    start = (n - keep) // 2
    return Spectrogram(
        sg.magnitudes[start:start + keep], sg.time_step, sg.freqs, sg.source_id,
        sg.t0 + start * sg.time_step,
    )


# -- serialization ----------------------------------------------------------------

_HEADER = struct.Struct("<4sHIIddI")


def write_spectrogram(sg: Spectrogram, path: str | Path) -> Path:
    """Header, UTF-8 source id, frequency bins, then the magnitude matrix.

    Header (little-endian): magic ``WGSG``, u16 version, u32 rows (time
    frames), u32 columns (frequency bins), f8 time step, f8 first-frame
    time, u32 source-id byte length. Frequencies and magnitudes are f8,
    magnitudes row-major.
    """
    sid = sg.source_id.encode()
    rows, cols = sg.magnitudes.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SPECTROGRAM_MAGIC, SPECTROGRAM_VERSION, rows, cols, sg.time_step, sg.t0, len(sid)))
        fh.write(sid)
        fh.write(np.ascontiguousarray(sg.freqs, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(sg.magnitudes, dtype="<f8").tobytes())
    return path


def read_spectrogram(path: str | Path) -> Spectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated spectrogram header")
    magic, version, rows, cols, dt, t0, n_sid = _HEADER.unpack_from(raw)
    if magic != SPECTROGRAM_MAGIC:
        raise ValueError(f"{path}: not a spectrogram file")
    if version != SPECTROGRAM_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = _HEADER.size
    sid = raw[pos:pos + n_sid].decode()
    pos += n_sid
    if len(raw) != pos + 8 * cols * (rows + 1):
        raise ValueError(f"{path}: size does not match a {rows}x{cols} spectrogram")
    freqs = np.frombuffer(raw, "<f8", cols, pos)
    mags = np.frombuffer(raw, "<f8", rows * cols, pos + 8 * cols).reshape(rows, cols)
    return Spectrogram(mags.astype(float), dt, freqs.astype(float), sid, t0)


def render_png(sg: Spectrogram, path: str | Path, db_range: float = 60.0) -> Path:
    """Grayscale image, time left to right and frequency bottom to top, in dB."""
    from PIL import Image

    mags = sg.magnitudes.T[::-1]
    peak = mags.max()
    if peak > 0:
        db = 10 * np.log10(np.maximum(mags / peak, 10 ** (-db_range / 10)))
        img = ((db + db_range) / db_range * 255).round().astype(np.uint8)
    else:
        img = np.zeros(mags.shape, dtype=np.uint8)
    Image.fromarray(img, mode="L").save(path)
    return Path(path)
