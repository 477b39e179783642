"""Ground-truth geometry, radar/scan configuration and the breathing model.

Positions are plain ``numpy`` arrays of shape ``(3,)`` in meters. Every
function accepting a slow time ``t`` also accepts an array of times and then
returns one value (or one row) per time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, GeometryError, OutOfRangeError

SPEED_OF_LIGHT = 299_792_458.0

# Time comparisons against the scan span tolerate float round-off.
_T_EPS = 1e-9


def vec3(values: Sequence[float]) -> np.ndarray:
    """Return a finite float64 vector of length 3."""
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.shape != (3,):
        raise ConfigurationError(f"expected 3 components, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ConfigurationError("vector components must be finite")
    return v


@dataclass(frozen=True)
class RadarConfig:
    wavelength: float
    bandwidth: float
    slow_time_rate: float
    num_elements: int = 8
    element_spacing: float = 1.9e-3
    array_axis: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))

    def __post_init__(self):
        if self.wavelength <= 0 or self.bandwidth <= 0 or self.slow_time_rate <= 0:
            raise ConfigurationError("wavelength, bandwidth and slow_time_rate must be > 0")
        if self.num_elements < 1 or self.element_spacing <= 0:
            raise ConfigurationError("need num_elements >= 1 and element_spacing > 0")
        axis = vec3(self.array_axis)
        norm = np.linalg.norm(axis)
        if norm == 0:
            raise ConfigurationError("array_axis must be nonzero")
        object.__setattr__(self, "array_axis", axis / norm)

    @classmethod
    def from_center_frequency(cls, center_frequency: float, **kwargs) -> "RadarConfig":
        return cls(wavelength=SPEED_OF_LIGHT / center_frequency, **kwargs)

    @property
    def range_resolution(self) -> float:
        """c / (2B): first null of the matched-filter range response."""
        return SPEED_OF_LIGHT / (2.0 * self.bandwidth)

    def element_offsets(self) -> np.ndarray:
        """Element positions along the array axis, centred on the array reference point."""
        idx = np.arange(self.num_elements) - (self.num_elements - 1) / 2.0
        return idx * self.element_spacing

    def to_dict(self) -> dict:
        return {
            "wavelength_m": self.wavelength,
            "bandwidth_hz": self.bandwidth,
            "slow_time_rate_hz": self.slow_time_rate,
            "num_elements": self.num_elements,
            "element_spacing_m": self.element_spacing,
            "array_axis": self.array_axis.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RadarConfig":
        if "wavelength_m" in d:
            wavelength = float(d["wavelength_m"])
        elif "center_frequency_hz" in d:
            wavelength = SPEED_OF_LIGHT / float(d["center_frequency_hz"])
        else:
            raise ConfigurationError("radar needs wavelength_m or center_frequency_hz")
        return cls(
            wavelength=wavelength,
            bandwidth=float(d["bandwidth_hz"]),
            slow_time_rate=float(d["slow_time_rate_hz"]),
            num_elements=int(d.get("num_elements", 8)),
            element_spacing=float(d.get("element_spacing_m", 1.9e-3)),
            array_axis=vec3(d.get("array_axis", [1.0, 0.0, 0.0])),
        )


def default_radar() -> RadarConfig:
    """79 GHz / 3.634 GHz FMCW, 8 receivers at 1.9 mm, 25 Hz slow time."""
    return RadarConfig.from_center_frequency(
        79.0e9, bandwidth=3.634e9, slow_time_rate=25.0, num_elements=8, element_spacing=1.9e-3
    )


@dataclass(frozen=True)
class ScanTrajectory:
    origin: np.ndarray
    velocity: np.ndarray
    duration: float

    def __post_init__(self):
        object.__setattr__(self, "origin", vec3(self.origin))
        object.__setattr__(self, "velocity", vec3(self.velocity))
        if not self.duration > 0:
            raise ConfigurationError("scan duration must be > 0")
        if np.linalg.norm(self.velocity) == 0:
            raise ConfigurationError("scan velocity must be nonzero")

    def to_dict(self) -> dict:
        return {
            "origin_m": self.origin.tolist(),
            "velocity_m_s": self.velocity.tolist(),
            "duration_s": self.duration,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScanTrajectory":
        return cls(vec3(d["origin_m"]), vec3(d["velocity_m_s"]), float(d["duration_s"]))


def default_trajectory() -> ScanTrajectory:
    """Scan from z = -0.45 m towards +z at 9.9 mm/s for 85 s."""
    return ScanTrajectory(np.array([0.0, 0.0, -0.45]), np.array([0.0, 0.0, 9.9e-3]), 85.0)


@dataclass(frozen=True)
class RespiratoryMotion:
    """Truncated Fourier series d(t) = sum_n Re[c_n exp(j n omega_r t)]."""

    omega_r: float = 0.0
    coeffs: tuple[complex, ...] = (0j, 0j, 0j)

    def __post_init__(self):
        if self.omega_r < 0:
            raise ConfigurationError("omega_r must be >= 0")
        coeffs = tuple(complex(c) for c in self.coeffs)
        if not coeffs:
            raise ConfigurationError("need at least the c_0 coefficient")
        if not all(np.isfinite(c.real) and np.isfinite(c.imag) for c in coeffs):
            raise ConfigurationError("respiratory coefficients must be finite")
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def order(self) -> int:
        return len(self.coeffs) - 1

    @classmethod
    def stationary(cls) -> "RespiratoryMotion":
        return cls(0.0, (0j,))

    def to_dict(self) -> dict:
        return {
            "omega_r_rad_s": self.omega_r,
            "coeffs_m": [[c.real, c.imag] for c in self.coeffs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RespiratoryMotion":
        return cls(float(d["omega_r_rad_s"]), tuple(complex(re, im) for re, im in d["coeffs_m"]))


@dataclass(frozen=True)
class Scatterer:
    position: np.ndarray
    reflectivity: float = 1.0
    motion: RespiratoryMotion = field(default_factory=RespiratoryMotion.stationary)

    def __post_init__(self):
        object.__setattr__(self, "position", vec3(self.position))
        if not self.reflectivity >= 0:
            raise ConfigurationError("reflectivity must be >= 0")

    def to_dict(self) -> dict:
        return {
            "position_m": self.position.tolist(),
            "reflectivity": self.reflectivity,
            "motion": self.motion.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scatterer":
        motion = d.get("motion")
        return cls(
            vec3(d["position_m"]),
            float(d.get("reflectivity", 1.0)),
            RespiratoryMotion.from_dict(motion) if motion else RespiratoryMotion.stationary(),
        )


@dataclass(frozen=True)
class Scene:
    scatterers: tuple[Scatterer, ...] = ()
    noise_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scatterers", tuple(self.scatterers))
        if not self.noise_sigma >= 0:
            raise ConfigurationError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return {
            "scatterers": [s.to_dict() for s in self.scatterers],
            "noise_sigma": self.noise_sigma,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            tuple(Scatterer.from_dict(s) for s in d.get("scatterers", [])),
            float(d.get("noise_sigma", 0.0)),
            int(d.get("rng_seed", 0)),
        )

    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.scatterers]).reshape(-1, 3)


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2))


def load_scene(path: str | Path) -> Scene:
    return Scene.from_dict(json.loads(Path(path).read_text()))


def _check_time(traj: ScanTrajectory, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(t < -_T_EPS) or np.any(t > traj.duration + _T_EPS):
        raise OutOfRangeError(f"time outside scan span [0, {traj.duration}] s")
    return t


def antenna_position(traj: ScanTrajectory, t) -> np.ndarray:
    """x_a(t) = x0 + t v. Returns shape (3,) for scalar t, (len(t), 3) otherwise."""
    t = _check_time(traj, t)
    return traj.origin + t[..., None] * traj.velocity


def respiratory_displacement(motion: RespiratoryMotion, t) -> np.ndarray | float:
    t = np.asarray(t, dtype=float)
    n = np.arange(len(motion.coeffs))
    c = np.asarray(motion.coeffs)
    phase = np.exp(1j * motion.omega_r * t[..., None] * n)
    d = np.real(phase @ c)
    return float(d) if d.ndim == 0 else d


def respiratory_velocity(motion: RespiratoryMotion, t) -> np.ndarray | float:
    """Time derivative of the displacement: omega_r sum_n n Re[j c_n exp(j n omega_r t)]."""
    t = np.asarray(t, dtype=float)
    n = np.arange(len(motion.coeffs))
    c = np.asarray(motion.coeffs) * n * 1j
    v = motion.omega_r * np.real(np.exp(1j * motion.omega_r * t[..., None] * n) @ c)
    return float(v) if v.ndim == 0 else v


def range_to(traj: ScanTrajectory, s: Scatterer, t) -> np.ndarray | float:
    """Antenna-to-scatterer distance including the breathing displacement."""
    xa = antenna_position(traj, t)
    r = np.linalg.norm(xa - s.position, axis=-1) + respiratory_displacement(s.motion, t)
    if np.any(r <= 0):
        raise GeometryError("nonpositive range; scatterer coincides with antenna")
    return float(r) if np.ndim(r) == 0 else r


def azimuth_to(traj: ScanTrajectory, array_axis, x, t) -> np.ndarray | float:
    """Angle in [0, pi] between the array axis and the line of sight to ``x``."""
    axis = vec3(array_axis)
    los = np.asarray(x, dtype=float) - antenna_position(traj, t)
    dist = np.linalg.norm(los, axis=-1)
    if np.any(dist == 0):
        raise GeometryError("zero-length line of sight")
    theta = np.arccos(np.clip((los @ axis) / dist, -1.0, 1.0))
    return float(theta) if np.ndim(theta) == 0 else theta


def instantaneous_doppler(traj: ScanTrajectory, s: Scatterer, t, wavelength: float):
    """Doppler frequency (Hz): scan-induced plus breathing-induced terms."""
    t = _check_time(traj, t)
    rel = traj.origin + t[..., None] * traj.velocity - s.position
    dist = np.linalg.norm(rel, axis=-1)
    if np.any(dist == 0):
        raise GeometryError("antenna coincides with scatterer")
    scan_term = (rel @ traj.velocity) / dist
    f = 2.0 / wavelength * (scan_term + respiratory_velocity(s.motion, t))
    return float(f) if np.ndim(f) == 0 else f
