"""Synthesis of the complex range/angle/slow-time cube for a breathing scene.

The cube is produced directly at the post-DFT level: a sinc range response per
scatterer, per-element carrier phases across the receive array, and an
N-point (optionally zero-padded) spatial DFT onto the angle grid.

Phase convention: a scatterer at range R contributes exp(+j 4 pi R / lambda),
so that the backprojection kernel exp(-j 4 pi r / lambda) focuses it and the
spectrogram frequency equals the Doppler (2/lambda) dR/dt.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, CoverageError, OutOfRangeError
from .scene import (
    RadarConfig,
    ScanTrajectory,
    Scene,
    antenna_position,
    respiratory_displacement,
)

SINC_NULLS = 4


@dataclass(frozen=True)
class SignalCube:
    values: np.ndarray  # (range_bin, angle_bin, slow_time)
    range_bin_size: float
    range_offset: float
    angle_grid: np.ndarray
    sample_rate: float
    t_start: float = 0.0
    wavelength: float = 299_792_458.0 / 79.0e9
    array_axis: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))

    def __post_init__(self):
        values = np.asarray(self.values)
        angle_grid = np.asarray(self.angle_grid, dtype=float)
        if values.ndim != 3:
            raise ConfigurationError("cube values must be 3-D (range, angle, time)")
        if self.range_bin_size <= 0 or self.sample_rate <= 0:
            raise ConfigurationError("range_bin_size and sample_rate must be > 0")
        if angle_grid.shape != (values.shape[1],):
            raise ConfigurationError("angle_grid length does not match the angle axis")
        if np.any(np.diff(angle_grid) <= 0):
            raise ConfigurationError("angle_grid must be strictly increasing")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "angle_grid", angle_grid)
        object.__setattr__(self, "array_axis", np.asarray(self.array_axis, dtype=float))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def num_samples(self) -> int:
        return self.values.shape[2]

    @property
    def range_axis(self) -> np.ndarray:
        return self.range_offset + self.range_bin_size * np.arange(self.values.shape[0])

    @property
    def times(self) -> np.ndarray:
        return self.t_start + np.arange(self.num_samples) / self.sample_rate

    @property
    def t_end(self) -> float:
        """End of the covered span (exclusive): t_start + n / f_s."""
        return self.t_start + self.num_samples / self.sample_rate

    def with_values(self, values: np.ndarray) -> "SignalCube":
        if values.shape != self.values.shape:
            raise ConfigurationError("replacement values must keep the cube shape")
        return replace(self, values=values)

    def metadata(self) -> dict:
        return {
            "shape": list(self.values.shape),
            "layout": "range-major, then angle, then time; little-endian float32 (re, im) pairs",
            "range_bin_size_m": self.range_bin_size,
            "range_offset_m": self.range_offset,
            "angle_grid_rad": self.angle_grid.tolist(),
            "sample_rate_hz": self.sample_rate,
            "t_start_s": self.t_start,
            "wavelength_m": self.wavelength,
            "array_axis": self.array_axis.tolist(),
        }


@dataclass(frozen=True)
class CubeAxes:
    """Sampling lattice for :func:`simulate_cube`.

    ``range_bin_size`` defaults to half the range resolution and
    ``angle_bins`` to the number of array elements (the plain spatial DFT).
    ``num_samples`` defaults to every slow-time sample inside the scan.
    """

    range_offset: float
    num_range_bins: int
    range_bin_size: float | None = None
    angle_bins: int | None = None
    num_samples: int | None = None
    t_start: float = 0.0


def angle_bins_for(radar: RadarConfig, n_bins: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Direction cosines and angles of the spatial-DFT bins, sorted by increasing angle.

    Bins whose direction cosine falls outside [-1, 1] (element spacing above
    half a wavelength combined with padding) are dropped.
    """
    n = radar.num_elements if n_bins is None else int(n_bins)
    if n < radar.num_elements:
        raise ConfigurationError("angle_bins must be >= num_elements")
    k = np.arange(n) - n // 2
    u = k * radar.wavelength / (n * radar.element_spacing)
    u = u[np.abs(u) <= 1.0]
    u = u[::-1]  # decreasing cosine <=> increasing angle
    return u, np.arccos(u)


def _range_kernel(offset: np.ndarray, resolution: float) -> np.ndarray:
    x = offset / resolution
    return np.where(np.abs(x) <= SINC_NULLS, np.sinc(x), 0.0)


def scatterer_contribution(
    s, radar: RadarConfig, traj: ScanTrajectory, times: np.ndarray, range_axis: np.ndarray,
    u_bins: np.ndarray,
) -> np.ndarray:
    """Noise-free cube contribution of one scatterer, shape (range, angle, time)."""
    xa = antenna_position(traj, times)  # (T, 3)
    d = respiratory_displacement(s.motion, times)
    ref_range = np.linalg.norm(xa - s.position, axis=1) + d  # (T,)
    offsets = radar.element_offsets()
    elem_pos = xa[:, None, :] + offsets[None, :, None] * radar.array_axis  # (T, E, 3)
    elem_range = np.linalg.norm(elem_pos - s.position, axis=2) + d[:, None]  # (T, E)
    # transmit from the array reference, receive on each element
    x_e = np.exp(2j * np.pi * (ref_range[:, None] + elem_range) / radar.wavelength)
    steer = np.exp(2j * np.pi * np.outer(offsets, u_bins) / radar.wavelength)  # (E, A)
    beams = (x_e @ steer) / math.sqrt(radar.num_elements)  # (T, A)
    profile = _range_kernel(range_axis[:, None] - ref_range[None, :], radar.range_resolution)
    return s.reflectivity * profile[:, None, :] * beams.T[None, :, :]


def simulate_cube(
    scene: Scene, radar: RadarConfig, traj: ScanTrajectory, axes: CubeAxes,
) -> SignalCube:
    """Simulate s(r, theta, t) for every scatterer in ``scene`` plus white noise."""
    dr = axes.range_bin_size or radar.range_resolution / 2.0
    if axes.num_range_bins < 2:
        raise ConfigurationError("need at least two range bins")
    fs = radar.slow_time_rate
    if axes.num_samples is None:
        n_t = int(math.floor((traj.duration - axes.t_start) * fs + 1e-9))
    else:
        n_t = int(axes.num_samples)
    if n_t < 1:
        raise ConfigurationError("cube needs at least one slow-time sample")
    times = axes.t_start + np.arange(n_t) / fs
    if times[-1] > traj.duration + 1e-9 or axes.t_start < 0:
        raise OutOfRangeError("slow-time samples extend beyond the scan")
    range_axis = axes.range_offset + dr * np.arange(axes.num_range_bins)
    u_bins, theta = angle_bins_for(radar, axes.angle_bins)

    values = np.zeros((axes.num_range_bins, len(u_bins), n_t), dtype=np.complex128)
    xa = antenna_position(traj, times)
    for k, s in enumerate(scene.scatterers):
        los = s.position - xa
        dist = np.linalg.norm(los, axis=1)
        r = dist + respiratory_displacement(s.motion, times)
        ang = np.arccos(np.clip(los @ radar.array_axis / dist, -1, 1))
        if r.min() < range_axis[0] or r.max() > range_axis[-1]:
            raise CoverageError(f"scatterer {k} range leaves the cube span")
        if ang.min() < theta[0] or ang.max() > theta[-1]:
            raise CoverageError(f"scatterer {k} angle leaves the cube span")
        values += scatterer_contribution(s, radar, traj, times, range_axis, u_bins)

    if scene.noise_sigma > 0:
        scale = scene.noise_sigma / math.sqrt(2.0)
        plane = values.shape[:2]
        for i in range(n_t):
            # one generator per absolute sample index keeps noise independent of slicing/threads
            rng = np.random.default_rng([scene.rng_seed, int(round(times[i] * fs))])
            z = rng.standard_normal((2,) + plane)
            values[:, :, i] += scale * (z[0] + 1j * z[1])

    return SignalCube(
        values=values,
        range_bin_size=dr,
        range_offset=axes.range_offset,
        angle_grid=theta,
        sample_rate=fs,
        t_start=axes.t_start,
        wavelength=radar.wavelength,
        array_axis=radar.array_axis,
    )


def window_indices(cube: SignalCube, window) -> slice:
    """Slow-time index range of the half-open interval [t' - dt/2, t' + dt/2)."""
    lo = window.center - window.length / 2.0
    start = int(math.ceil((lo - cube.t_start) * cube.sample_rate - 1e-6))
    count = int(round(window.length * cube.sample_rate))
    if start < 0 or start + count > cube.num_samples or count < 1:
        raise OutOfRangeError(
            f"window [{lo:.3f}, {lo + window.length:.3f}) s outside cube span "
            f"[{cube.t_start:.3f}, {cube.t_end:.3f}) s"
        )
    return slice(start, start + count)


def cube_slice(cube: SignalCube, window) -> SignalCube:
    idx = window_indices(cube, window)
    return replace(
        cube,
        values=cube.values[:, :, idx],
        t_start=cube.t_start + idx.start / cube.sample_rate,
    )


def save_cube(cube: SignalCube, path: str | Path) -> Path:
    """Write ``<path>.bin`` (interleaved little-endian float32) and ``<path>.json``."""
    base = Path(path).with_suffix("")
    interleaved = np.empty(cube.values.shape + (2,), dtype="<f4")
    interleaved[..., 0] = cube.values.real
    interleaved[..., 1] = cube.values.imag
    base.with_suffix(".bin").write_bytes(interleaved.tobytes(order="C"))
    base.with_suffix(".json").write_text(json.dumps(cube.metadata(), indent=2))
    return base.with_suffix(".bin")


def load_cube(path: str | Path) -> SignalCube:
    base = Path(path).with_suffix("")
    meta = json.loads(base.with_suffix(".json").read_text())
    shape = tuple(meta["shape"])
    raw = np.frombuffer(base.with_suffix(".bin").read_bytes(), dtype="<f4").reshape(shape + (2,))
    values = raw[..., 0].astype(np.float64) + 1j * raw[..., 1].astype(np.float64)
    return SignalCube(
        values=values,
        range_bin_size=meta["range_bin_size_m"],
        range_offset=meta["range_offset_m"],
        angle_grid=np.array(meta["angle_grid_rad"]),
        sample_rate=meta["sample_rate_hz"],
        t_start=meta["t_start_s"],
        wavelength=meta["wavelength_m"],
        array_axis=np.array(meta["array_axis"]),
    )
