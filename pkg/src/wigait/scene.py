"""Transceiver geometry and the bistatic Doppler factor."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
CARRIER_HZ = 5.32e9
DEFAULT_WAVELENGTH = SPEED_OF_LIGHT / CARRIER_HZ

PSI_MODES = ("geometric", "constant")


def _vec3(value) -> np.ndarray:
    arr = np.asarray(value, dtype=float).reshape(3)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SceneConfig:
    """Link placement and walk route.

    The default geometry is a 0.64 m link at 1.1 m height with the route
    starting 0.95 m from the link and running 3.9 m perpendicular to it,
    away from the transceivers. ``start_point`` is the torso-line reference:
    its height is where the bistatic factor is evaluated, while walkers are
    placed with their feet on ``z = 0`` directly below it.
    """

    tx: np.ndarray = field(default_factory=lambda: _vec3((-0.32, 0.0, 1.1)))
    rx: np.ndarray = field(default_factory=lambda: _vec3((0.32, 0.0, 1.1)))
    start_point: np.ndarray = field(default_factory=lambda: _vec3((0.0, 0.95, 1.1)))
    walk_length: float = 3.9
    wavelength: float = DEFAULT_WAVELENGTH
    packet_rate: float = 500.0
    psi_mode: str = "geometric"
    psi_value: float = 2.0

    def __post_init__(self):
        for name in ("tx", "rx", "start_point"):
            object.__setattr__(self, name, _vec3(getattr(self, name)))
        if not self.wavelength > 0:
            raise ValueError(f"wavelength must be positive, got {self.wavelength}")
        if not self.packet_rate > 0:
            raise ValueError(f"packet_rate must be positive, got {self.packet_rate}")
        if not self.walk_length > 0:
            raise ValueError(f"walk_length must be positive, got {self.walk_length}")
        if self.psi_mode not in PSI_MODES:
            raise ValueError(f"psi_mode must be one of {PSI_MODES}, got {self.psi_mode!r}")
        if self.psi_mode == "constant" and not self.psi_value > 0:
            raise ValueError("constant psi must be positive")
        if np.array_equal(self.tx, self.rx):
            raise ValueError("transmitter and receiver must not coincide")
        self.walk_direction  # validates the route

    @property
    def link_midpoint(self) -> np.ndarray:
        return 0.5 * (self.tx + self.rx)

    @property
    def walk_direction(self) -> np.ndarray:
        """Horizontal unit vector pointing from the link towards the start point."""
        d = self.start_point - self.link_midpoint
        d = np.array([d[0], d[1], 0.0])
        norm = np.linalg.norm(d)
        if norm == 0:
            raise ValueError("start point lies above the link midpoint; walk direction undefined")
        return d / norm

    @property
    def walk_midpoint(self) -> np.ndarray:
        return self.start_point + self.walk_direction * (0.5 * self.walk_length)

    def psi(self) -> float:
        """Bistatic factor ``cos(phi_R) + cos(phi_T)`` used to convert Doppler to speed.

        In geometric mode the angles are taken between the walk direction and
        the transceiver-to-body vectors at the midpoint of the route.
        """
        if self.psi_mode == "constant":
            return float(self.psi_value)
        return bistatic_factor(self.walk_midpoint, self.walk_direction, self.tx, self.rx)

    def to_dict(self) -> dict:
        return {
            "tx": [float(v) for v in self.tx],
            "rx": [float(v) for v in self.rx],
            "start_point": [float(v) for v in self.start_point],
            "walk_length": float(self.walk_length),
            "wavelength": float(self.wavelength),
            "packet_rate": float(self.packet_rate),
            "psi_mode": self.psi_mode,
            "psi_value": float(self.psi_value),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


def bistatic_factor(point, direction, tx, rx) -> float:
    point = np.asarray(point, dtype=float)
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    total = 0.0
    for antenna in (tx, rx):
        v = point - np.asarray(antenna, dtype=float)
        total += float(direction @ v / np.linalg.norm(v))
    return total
