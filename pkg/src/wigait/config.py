"""Sectioned plain-text configuration for the batch tools.

Files use INI syntax. Every key has a typed default and unknown sections
or keys are rejected, so a typo cannot silently fall back to a default.
Vectors are written as comma-separated numbers.
"""
from __future__ import annotations

import configparser
import copy
import json
from io import StringIO
from pathlib import Path

from .classifier import TrainConfig
from .dsp import DspConfig
from .rfsim import CsiEmulation, ScatteringParams
from .scene import CARRIER_HZ, SPEED_OF_LIGHT, SceneConfig
from .walker import SyntheticGaitParams

CAPTURES = ("synthetic", "measured")

DEFAULTS: dict[str, dict[str, object]] = {
    "scene": {
        "tx": (-0.32, 0.0, 1.1),
        "rx": (0.32, 0.0, 1.1),
        "start_point": (0.0, 0.95, 1.1),
        "walk_length": 3.9,
        "carrier_hz": CARRIER_HZ,
        "packet_rate": 500.0,
        "psi_mode": "geometric",
        "psi_value": 2.0,
    },
    "scattering": {"alpha": 0.1, "beta": 1.0, "m": 8.0},
    "synth": {
        "fps": 50.0,
        "sim_fps": 250.0,
        "healthy_speed": 1.1,
        "healthy_speed_spread": 0.1,
        "healthy_cycle": 1.1,
        "healthy_cycle_spread": 0.1,
        "healthy_modulation": 0.1,
        "unhealthy_speed": 0.65,
        "unhealthy_speed_spread": 0.1,
        "unhealthy_cycle": 1.5,
        "unhealthy_cycle_spread": 0.15,
        "unhealthy_modulation": 0.2,
        "unhealthy_condition": "impaired",
        "arm_swing": 0.35,
        "count": 3,
    },
    "capture": {
        "mode": "synthetic",
        "antennas": 3,
        "subcarriers": 30,
        "antenna_spacing": 0.5,
        "clutter_level": 0.3,
        "noise_level": 2e-4,
        "gain_jitter_db": 1.0,
    },
    "dsp": {"window": 0.3, "shift": 0.016, "tapers": 1, "pad": 2, "components": 15},
    "features": {"fraction": 0.5},
    "train": {
        "learning_rate": 1e-5,
        "epochs": 100,
        "batch_size": 10,
        "dropout": 0.5,
        "class_weight": 1.0,
    },
    "adapt": {"grid_size": 25, "grid_min": 0.2, "grid_max": 5.0, "repeats": 10},
    "protocol": {"rounds": 8},
    "pipeline": {"train_per_class": 5, "pool_per_class": 15, "seed": 0},
}


class ConfigError(ValueError):
    pass


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            vals = tuple(float(v) for v in raw.replace(",", " ").split())
            if len(vals) != len(default):
                raise ValueError(raw)
            return vals
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Config:
    """Typed view of all sections; ``values[section][key]``."""

    def __init__(self, values: dict | None = None):
        self.values = copy.deepcopy(DEFAULTS)
        if values:
            for section, keys in values.items():
                for key, value in keys.items():
                    self.set(section, key, value)

    def _default(self, section: str, key: str, where: str = "config"):
        if section not in DEFAULTS:
            raise ConfigError(f"{where}: unknown section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        return DEFAULTS[section][key]

    def set(self, section: str, key: str, value, where: str = "config") -> None:
        default = self._default(section, key, where)
        if isinstance(value, str):
            value = _parse(value, default, f"{where} [{section}] {key}")
        elif isinstance(default, tuple):
            value = tuple(float(v) for v in value)
        elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        self.values[section][key] = value

    def get(self, section: str, key: str):
        self._default(section, key)
        return self.values[section][key]

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def to_dict(self) -> dict:
        return {s: {k: list(v) if isinstance(v, tuple) else v for k, v in keys.items()}
                for s, keys in self.values.items()}

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section, keys in self.values.items():
            parser[section] = {k: _format(v) for k, v in keys.items()}
        buf = StringIO()
        parser.write(buf)
        return buf.getvalue()

    # -- typed builders ---------------------------------------------------------

    def scene(self) -> SceneConfig:
        s = self["scene"]
        if not s["carrier_hz"] > 0:
            raise ConfigError("[scene] carrier_hz must be positive")
        return SceneConfig(
            tx=s["tx"], rx=s["rx"], start_point=s["start_point"], walk_length=s["walk_length"],
            wavelength=SPEED_OF_LIGHT / s["carrier_hz"], packet_rate=s["packet_rate"],
            psi_mode=s["psi_mode"], psi_value=s["psi_value"],
        )

    def scattering(self) -> ScatteringParams:
        return ScatteringParams(**self["scattering"])

    def emulation(self) -> CsiEmulation:
        c = {k: v for k, v in self["capture"].items() if k != "mode"}
        return CsiEmulation(**c)

    def capture_mode(self) -> str:
        mode = self.get("capture", "mode")
        if mode not in CAPTURES:
            raise ConfigError(f"[capture] mode must be one of {CAPTURES}, got {mode!r}")
        return mode

    def dsp(self) -> DspConfig:
        return DspConfig(**self["dsp"])

    def train(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(**self["train"], seed=int(seed))

    def gait_params(self, label: str, speed: float, cycle: float) -> SyntheticGaitParams:
        s = self["synth"]
        return SyntheticGaitParams(
            mean_speed=speed,
            gait_cycle=cycle,
            step_length=speed * cycle / 2,
            speed_modulation=s[f"{label}_modulation"],
            arm_swing=s["arm_swing"],
        )


def read_config(path: str | Path | None) -> Config:
    """Load an INI file, or the config snapshot stored in a run manifest (JSON)."""
    cfg = Config()
    if path is None:
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix == ".json":
        try:
            doc = json.loads(path.read_text())
            snapshot = doc["config"]
        except (ValueError, KeyError, TypeError):
            raise ConfigError(f"{path}: not a run manifest with a config snapshot") from None
        for section, keys in snapshot.items():
            for key, value in keys.items():
                cfg.set(section, key, value, where=str(path))
        return cfg
    parser = configparser.ConfigParser()
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        for key, raw in parser[section].items():
            cfg.set(section, key, raw, where=str(path))
    return cfg
