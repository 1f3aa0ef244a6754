"""Two-hidden-layer perceptron for healthy/unhealthy gait classification.

Everything is plain numpy: forward and backward passes, inverted dropout,
class-weighted cross-entropy and the Adam update. Class 0 is healthy and
class 1 unhealthy; the class weight ``w`` multiplies the loss of unhealthy
samples.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

LAYER_SIZES = (6, 512, 256, 2)
MODEL_MAGIC = b"WGMM"
MODEL_VERSION = 1
HEALTHY, UNHEALTHY = 0, 1
# Training runs in single precision for speed; stored models and the
# gradient routines used for checking are double precision.
TRAIN_DTYPE = np.float32


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    epochs: int = 100
    batch_size: int = 10
    dropout: float = 0.5
    class_weight: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "epochs", "batch_size", "class_weight", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of the training hyper-parameters (seed and class weight included)."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**self.to_dict(), **kw})


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    scale: np.ndarray
    degenerate: tuple[int, ...] = ()

    def apply(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist(), "degenerate": list(self.degenerate)}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.asarray(d["mean"], float), np.asarray(d["scale"], float), tuple(d.get("degenerate", ())))

    @classmethod
    def identity(cls, n: int) -> "Scaler":
        return cls(np.zeros(n), np.ones(n))


def fit_scaler(train) -> Scaler:
    """z-score parameters of the training features.

    Zero-variance features are flagged and passed through untouched (zero
    offset, unit scale).
    """
    x = np.asarray(train, dtype=float)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("empty training set")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    flat = std == 0
    return Scaler(np.where(flat, 0.0, mean), np.where(flat, 1.0, std), tuple(np.flatnonzero(flat).tolist()))


def standardize(train, apply_to) -> tuple[np.ndarray, Scaler]:
    scaler = fit_scaler(train)
    return scaler.apply(apply_to), scaler


@dataclass(frozen=True)
class MlpModel:
    weights: tuple[np.ndarray, ...]  # W1, b1, W2, b2, W3, b3
    scaler: Scaler
    config: TrainConfig = field(default_factory=TrainConfig)
    history: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=float) for w in self.weights)
        if len(ws) != 6:
            raise ValueError("expected six weight arrays")
        for i, (n_in, n_out) in enumerate(zip(LAYER_SIZES[:-1], LAYER_SIZES[1:])):
            if ws[2 * i].shape != (n_in, n_out) or ws[2 * i + 1].shape != (n_out,):
                raise ValueError(f"layer {i} has wrong shape")
        if not all(np.all(np.isfinite(w)) for w in ws):
            raise ValueError("non-finite weights")
        for w in ws:
            w.setflags(write=False)
        object.__setattr__(self, "weights", ws)

    def logits(self, x_std: np.ndarray) -> np.ndarray:
        return forward(self.weights, x_std)[-1]

    def __eq__(self, other):
        if not isinstance(other, MlpModel):
            return NotImplemented
        return (
            self.config == other.config
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and np.array_equal(self.scaler.mean, other.scaler.mean)
            and np.array_equal(self.scaler.scale, other.scaler.scale)
        )

    __hash__ = None


def init_weights(rng: np.random.Generator, sizes=LAYER_SIZES) -> list[np.ndarray]:
    """Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    out = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(n_in)
        out.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
        out.append(rng.uniform(-bound, bound, size=n_out))
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(weights, x, masks=None):
    """Activations (h1, h2, logits); ``masks`` are pre-scaled dropout multipliers."""
    w1, b1, w2, b2, w3, b3 = weights
    h1 = np.maximum(x @ w1 + b1, 0.0)
    if masks is not None:
        h1 = h1 * masks[0]
    h2 = np.maximum(h1 @ w2 + b2, 0.0)
    if masks is not None:
        h2 = h2 * masks[1]
    return h1, h2, h2 @ w3 + b3


def sample_weights(y: np.ndarray, class_weight: float) -> np.ndarray:
    return np.where(np.asarray(y) == UNHEALTHY, class_weight, 1.0)


def loss_and_grads(weights, x, y, class_weight: float = 1.0, masks=None):
    """Weighted cross-entropy averaged over the batch and its gradients.

    ``loss = mean_n w_n * -log p_n[y_n]`` with ``w_n = class_weight`` for
    unhealthy samples and 1 otherwise.
    """
    w1, b1, w2, b2, w3, b3 = weights
    x = np.asarray(x, dtype=w1.dtype)
    y = np.asarray(y, dtype=int)
    n = len(y)
    h1, h2, z = forward(weights, x, masks)
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    sw = sample_weights(y, class_weight).astype(z.dtype)
    loss = float(np.sum(-logp[np.arange(n), y] * sw) / n)

    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz *= (sw / n)[:, None]
    g_w3 = h2.T @ dz
    g_b3 = dz.sum(axis=0)
    dh2 = dz @ w3.T
    if masks is not None:
        dh2 = dh2 * masks[1]
    dh2 = dh2 * (h2 > 0)
    g_w2 = h1.T @ dh2
    g_b2 = dh2.sum(axis=0)
    dh1 = dh2 @ w2.T
    if masks is not None:
        dh1 = dh1 * masks[0]
    dh1 = dh1 * (h1 > 0)
    g_w1 = x.T @ dh1
    g_b1 = dh1.sum(axis=0)
    return loss, [g_w1, g_b1, g_w2, g_b2, g_w3, g_b3]


def _dropout_masks(rng, n: int, rate: float, dtype=float):
    if rate == 0:
        return None
    keep = 1.0 - rate
    return [
        ((rng.random((n, size)) < keep) / keep).astype(dtype)
        for size in LAYER_SIZES[1:3]
    ]


def train(x, y, config: TrainConfig | None = None, scaler: Scaler | None = None) -> MlpModel:
    """Fit the network on raw features ``x`` (standardized internally) and labels ``y``.

    The scaler is fitted on ``x`` unless one is given. Mini-batches are
    reshuffled every epoch and the last batch of an epoch may be short.
    ``history`` records the dropout-free weighted loss on the whole training
    set after each epoch.
    """
    cfg = config or TrainConfig()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=int)
    if len(x) == 0:
        raise TrainingError("empty training set")
    if x.ndim != 2 or x.shape[1] != LAYER_SIZES[0] or len(y) != len(x):
        raise ValueError(f"expected ({len(y)}, {LAYER_SIZES[0]}) features")
    if not set(np.unique(y)) <= {HEALTHY, UNHEALTHY}:
        raise ValueError("labels must be 0 (healthy) or 1 (unhealthy)")
    if len(np.unique(y)) < 2:
        raise TrainingError("training set contains a single class")
    scaler = scaler or fit_scaler(x)
    xs = scaler.apply(x)

    init_seq, shuffle_seq, drop_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    init = [w.astype(TRAIN_DTYPE) for w in init_weights(np.random.default_rng(init_seq))]
    xs = xs.astype(TRAIN_DTYPE)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    drop_rng = np.random.default_rng(drop_seq)
    # one flat buffer for parameters, gradients and moments so that each
    # Adam step is a handful of vectorized operations
    flat = np.concatenate([w.ravel() for w in init])
    weights = _views(flat, init)
    grad_flat = np.empty_like(flat)
    grads_out = _views(grad_flat, init)
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    tmp = np.empty_like(flat)
    b1, b2, eps = TRAIN_DTYPE(cfg.beta1), TRAIN_DTYPE(cfg.beta2), TRAIN_DTYPE(cfg.eps)
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(x))
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            masks = _dropout_masks(drop_rng, len(idx), cfg.dropout, TRAIN_DTYPE)
            loss, grads = loss_and_grads(weights, xs[idx], y[idx], cfg.class_weight, masks)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}")
            for dst, g in zip(grads_out, grads):  # noqa: B007
                dst[...] = g
            step += 1
            m *= b1
            np.multiply(grad_flat, 1 - b1, out=tmp)
            m += tmp
            np.multiply(grad_flat, grad_flat, out=tmp)
            v *= b2
            tmp *= 1 - b2
            v += tmp
            # w -= lr_t * m / (sqrt(v / c2) + eps) with the bias corrections folded in
            c1 = 1 - cfg.beta1**step
            c2 = 1 - cfg.beta2**step
            np.multiply(v, TRAIN_DTYPE(1 / c2), out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += eps
            np.divide(m, tmp, out=tmp)
            tmp *= TRAIN_DTYPE(cfg.learning_rate / c1)
            flat -= tmp
        history.append(loss_and_grads(weights, xs, y, cfg.class_weight)[0])
    weights = [w.astype(float) for w in weights]
    return MlpModel(tuple(weights), scaler, cfg, tuple(history))


def _views(flat: np.ndarray, like) -> list[np.ndarray]:
    out, pos = [], 0
    for w in like:
        out.append(flat[pos:pos + w.size].reshape(w.shape))
        pos += w.size
    return out


def predict(model: MlpModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Class indices and probabilities for raw feature rows. Ties go to class 0."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input features")
    if x.shape[1] != LAYER_SIZES[0]:
        raise ValueError(f"expected {LAYER_SIZES[0]} features per row")
    probs = softmax(model.logits(model.scaler.apply(x)))
    return np.argmax(probs, axis=1), probs


# -- model file ---------------------------------------------------------------

def write_model(model: MlpModel, path: str | Path) -> Path:
    """Binary model: magic, u16 version, u32 header length, JSON header, little-endian f8 weights.

    Weights follow the header in the order W1, b1, W2, b2, W3, b3, each
    flattened row-major with W_k shaped (inputs, outputs).
    """
    header = {
        "layer_sizes": list(LAYER_SIZES),
        "scaler": model.scaler.to_dict(),
        "config": model.config.to_dict(),
        "config_hash": model.config.digest(),
        "seed": model.config.seed,
        "init": "uniform(+-1/sqrt(fan_in))",
        "history": list(model.history),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + struct.pack("<HI", MODEL_VERSION, len(blob)) + blob)
        for w in model.weights:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
    return path


def read_model(path: str | Path) -> MlpModel:
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    version, n = struct.unpack_from("<HI", raw, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    header = json.loads(raw[10:10 + n])
    sizes = tuple(header["layer_sizes"])
    if sizes != LAYER_SIZES:
        raise ValueError(f"{path}: layer sizes {sizes} != {LAYER_SIZES}")
    shapes = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        shapes += [(n_in, n_out), (n_out,)]
    total = sum(int(np.prod(s)) for s in shapes)
    data = np.frombuffer(raw, dtype="<f8", offset=10 + n)
    if len(data) != total:
        raise ValueError(f"{path}: expected {total} weights, found {len(data)}")
    weights, pos = [], 0
    for s in shapes:
        k = int(np.prod(s))
        weights.append(data[pos:pos + k].reshape(s).astype(float))
        pos += k
    return MlpModel(
        tuple(weights), Scaler.from_dict(header["scaler"]),
        TrainConfig(**header["config"]), tuple(header.get("history", ())),
    )
