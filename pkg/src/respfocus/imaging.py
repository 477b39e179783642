"""Backprojection image formation with optional motion-phase compensation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ShapeError
from .scene import ScanTrajectory, antenna_position, vec3
from .simulator import SignalCube, window_indices


@dataclass(frozen=True)
class ImageGrid:
    origin: np.ndarray
    spacing: np.ndarray
    dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", vec3(self.origin))
        spacing = vec3(self.spacing)
        if np.any(spacing <= 0):
            raise ConfigurationError("voxel spacing must be > 0")
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ConfigurationError("dims must be three positive integers")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "dims", dims)

    @classmethod
    def centered(cls, center, half_extent, spacing) -> "ImageGrid":
        """Grid of voxels covering ``center +- half_extent`` (per axis)."""
        center, half_extent, spacing = vec3(center), vec3(half_extent), vec3(spacing)
        n = np.floor(half_extent / spacing + 1e-9).astype(int)
        return cls(center - n * spacing, spacing, tuple(2 * n + 1))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def axes(self) -> list[np.ndarray]:
        return [self.origin[i] + self.spacing[i] * np.arange(self.dims[i]) for i in range(3)]

    def points(self) -> np.ndarray:
        """Voxel centres, shape (size, 3), C order over (x, y, z) indices."""
        gx, gy, gz = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def same_as(self, other: "ImageGrid") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-12)
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-12)
        )

    def to_dict(self) -> dict:
        return {
            "origin_m": self.origin.tolist(),
            "spacing_m": self.spacing.tolist(),
            "dims": list(self.dims),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImageGrid":
        return cls(np.array(d["origin_m"]), np.array(d["spacing_m"]), tuple(d["dims"]))


@dataclass(frozen=True)
class SarImage:
    grid: ImageGrid
    values: np.ndarray  # complex, shape grid.dims
    coverage_misses: int = 0

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.size != self.grid.size:
            raise ShapeError("value count does not match the grid")
        object.__setattr__(self, "values", values.reshape(self.grid.dims))


@dataclass(frozen=True)
class IntensityVolume:
    """Real, nonnegative voxel volume such as |I|^2 or an incoherent sum."""

    grid: ImageGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.size != self.grid.size:
            raise ShapeError("value count does not match the grid")
        object.__setattr__(self, "values", values.reshape(self.grid.dims))


@dataclass(frozen=True)
class TimeWindow:
    center: float
    length: float

    def __post_init__(self):
        if not self.length > 0:
            raise ConfigurationError("window length must be > 0")

    @property
    def start(self) -> float:
        return self.center - self.length / 2.0

    @property
    def end(self) -> float:
        return self.center + self.length / 2.0


def psi(r, wavelength: float):
    """Two-way carrier phase 4 pi r / lambda."""
    return 4.0 * np.pi * np.asarray(r) / wavelength


def contribution_matrix(
    cube: SignalCube, traj: ScanTrajectory, points: np.ndarray, window: TimeWindow,
    chunk: int = 2048,
) -> tuple[np.ndarray, int]:
    """Per-voxel, per-sample backprojection terms.

    Returns ``A`` of shape (n_points, n_window_samples) with
    ``A[v, k] = s(r, theta, t_k) exp(-j psi) / f_s`` (bilinear read of the
    cube) and the number of voxel-samples that fell outside the cube's
    range/angle coverage (those terms are zero).
    """
    idx = window_indices(cube, window)
    times = cube.times[idx]
    data = np.ascontiguousarray(cube.values[:, :, idx])
    n_r, n_a, n_k = data.shape
    flat = data.reshape(-1)
    xa = antenna_position(traj, np.clip(times, 0.0, traj.duration))
    axis = cube.array_axis
    grid_theta = cube.angle_grid
    k_idx = np.arange(n_k)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    out = np.empty((len(points), n_k), dtype=np.complex128)
    misses = 0
    for lo in range(0, len(points), chunk):
        p = points[lo:lo + chunk]
        los = p[:, None, :] - xa[None, :, :]
        r = np.sqrt(np.einsum("vki,vki->vk", los, los))
        with np.errstate(invalid="ignore", divide="ignore"):
            theta = np.arccos(np.clip((los @ axis) / r, -1.0, 1.0))
        fr = (r - cube.range_offset) / cube.range_bin_size
        ok = (fr >= 0) & (fr <= n_r - 1) & (theta >= grid_theta[0]) & (theta <= grid_theta[-1])
        ok &= r > 0
        i0 = np.clip(np.floor(fr).astype(np.int64), 0, n_r - 2)
        wr = fr - i0
        j0 = np.clip(np.searchsorted(grid_theta, theta, side="right") - 1, 0, n_a - 2)
        wa = (theta - grid_theta[j0]) / (grid_theta[j0 + 1] - grid_theta[j0])
        base = (i0 * n_a + j0) * n_k + k_idx
        v00 = flat[base]
        v01 = flat[base + n_k]
        v10 = flat[base + n_a * n_k]
        v11 = flat[base + n_a * n_k + n_k]
        s = (1 - wr) * ((1 - wa) * v00 + wa * v01) + wr * ((1 - wa) * v10 + wa * v11)
        s = np.where(ok, s, 0.0)
        misses += int(np.count_nonzero(~ok))
        out[lo:lo + chunk] = s * np.exp(-1j * psi(r, cube.wavelength)) / cube.sample_rate
    return out, misses


def backproject(
    cube: SignalCube, traj: ScanTrajectory, grid: ImageGrid, window: TimeWindow,
    phase: np.ndarray | None = None,
) -> SarImage:
    """Backprojection of ``cube`` over ``window`` onto ``grid``.

    ``phase`` holds the motion-phase samples phi(t) on the window's slow-time
    grid; it is removed via exp(-j phi(t)). Voxel samples outside the cube's
    range/angle coverage contribute zero and are counted in
    ``SarImage.coverage_misses``.
    """
    a, misses = contribution_matrix(cube, traj, grid.points(), window)
    if phase is not None:
        phase = np.asarray(phase, dtype=float)
        if phase.shape != (a.shape[1],):
            raise ShapeError(f"phase needs {a.shape[1]} samples, got {phase.shape}")
        a = a * np.exp(-1j * phase)[None, :]
    return SarImage(grid, a.sum(axis=1), misses)


def _write_volume(values: np.ndarray, grid: ImageGrid, path: Path, extra: dict) -> Path:
    base = path.with_suffix("")
    if np.iscomplexobj(values):
        buf = np.empty(values.shape + (2,), dtype="<f4")
        buf[..., 0] = values.real
        buf[..., 1] = values.imag
        dtype = "complex64 as little-endian float32 (re, im) pairs"
    else:
        buf = values.astype("<f4")
        dtype = "little-endian float32"
    base.with_suffix(".bin").write_bytes(buf.tobytes(order="C"))
    meta = {"grid": grid.to_dict(), "dtype": dtype, "layout": "x-major, then y, then z"}
    meta.update(extra)
    base.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return base.with_suffix(".bin")


def save_image(image: SarImage | IntensityVolume, path: str | Path) -> Path:
    extra = {"coverage_misses": image.coverage_misses} if isinstance(image, SarImage) else {}
    return _write_volume(image.values, image.grid, Path(path), extra)


def load_image(path: str | Path) -> SarImage | IntensityVolume:
    base = Path(path).with_suffix("")
    meta = json.loads(base.with_suffix(".json").read_text())
    grid = ImageGrid.from_dict(meta["grid"])
    raw = np.frombuffer(base.with_suffix(".bin").read_bytes(), dtype="<f4")
    if meta["dtype"].startswith("complex"):
        raw = raw.reshape(grid.dims + (2,))
        return SarImage(grid, raw[..., 0] + 1j * raw[..., 1], meta.get("coverage_misses", 0))
    return IntensityVolume(grid, raw.reshape(grid.dims).astype(float))


def max_projection(image: SarImage | IntensityVolume | np.ndarray, axis: int) -> np.ndarray:
    values = image.values if hasattr(image, "values") else np.asarray(image)
    return np.abs(values).max(axis=axis)


def write_pgm(plane: np.ndarray, path: str | Path) -> None:
    """Binary 8-bit PGM of a 2-D array scaled to its maximum."""
    plane = np.asarray(plane, dtype=float)
    peak = plane.max()
    scaled = np.zeros_like(plane) if peak <= 0 else plane / peak
    pixels = np.round(255 * np.clip(scaled, 0, 1)).astype(np.uint8)
    rows, cols = pixels.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode() + pixels.tobytes())


def voxel_ranges(grid: ImageGrid, antenna: np.ndarray) -> np.ndarray:
    """Distance from ``antenna`` to each voxel centre (flattened C order)."""
    return np.linalg.norm(grid.points() - antenna, axis=1)
