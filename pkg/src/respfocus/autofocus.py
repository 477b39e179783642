"""Motion-phase estimation by image-sharpness maximisation and incoherent fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import FocusError, ShapeError, UndefinedMetricError
from .imaging import ImageGrid, IntensityVolume, SarImage, TimeWindow, contribution_matrix
from .scene import ScanTrajectory, antenna_position
from .simulator import SignalCube, window_indices
from .tfsep import MixtureParams

SIMPLEX_TOL = 1e-3  # rad, simplex diameter
MAX_EVALS = 300
SIMPLEX_STEP = 1.0  # rad, initial simplex edge
CROP_RESOLUTIONS = 5.0
SCAN_AMPLITUDES = np.arange(0.5, 4.01, 0.5)  # rad
SCAN_PHASES = 12


@dataclass(frozen=True)
class PhaseCoeffs:
    """phi(t) = Re[b1 exp(j w t) + b2 exp(2 j w t)], t in absolute scan time."""

    b1: complex = 0j
    b2: complex = 0j
    omega_r: float = 0.0

    def __post_init__(self):
        for b in (self.b1, self.b2):
            if not (np.isfinite(complex(b).real) and np.isfinite(complex(b).imag)):
                raise ValueError("phase coefficients must be finite")
        object.__setattr__(self, "b1", complex(self.b1))
        object.__setattr__(self, "b2", complex(self.b2))

    def phase(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        e = np.exp(1j * self.omega_r * t)
        return np.real(self.b1 * e + self.b2 * e * e)

    def as_vector(self) -> np.ndarray:
        return np.array([self.b1.real, self.b1.imag, self.b2.real, self.b2.imag])

    @classmethod
    def from_vector(cls, x, omega_r: float) -> "PhaseCoeffs":
        return cls(complex(x[0], x[1]), complex(x[2], x[3]), omega_r)

    def to_dict(self) -> dict:
        return {
            "b1_rad": [self.b1.real, self.b1.imag],
            "b2_rad": [self.b2.real, self.b2.imag],
            "omega_r_rad_s": self.omega_r,
        }


@dataclass(frozen=True)
class FocusResult:
    image: SarImage
    phase: np.ndarray  # phi(t) on the window's slow-time samples
    sharpness_before: float
    sharpness_after: float
    coeffs: PhaseCoeffs

    def summary(self, n: int, m: int) -> dict:
        return {
            "n": n,
            "m": m,
            "sharpness_before": self.sharpness_before,
            "sharpness_after": self.sharpness_after,
            "phase_coeffs": self.coeffs.to_dict(),
        }


def _sharpness_from_power(p: np.ndarray, voxel_volume: float) -> float:
    total = float(np.sum(p))
    if total <= 0.0:
        raise UndefinedMetricError("sharpness of an all-zero image is undefined")
    return float(np.sum(p * p)) / (total * total) / voxel_volume


def mb_sharpness(image: SarImage | IntensityVolume) -> float:
    """Fourth-power over squared second-power concentration, in 1/m^3.

    For a complex image this is sum|I|^4 / (sum|I|^2)^2 / dV. An
    :class:`IntensityVolume` already holds |I|^2-like power, so its values
    enter as the squared magnitude.
    """
    if isinstance(image, IntensityVolume):
        p = image.values
    else:
        v = image.values
        p = v.real**2 + v.imag**2
    return _sharpness_from_power(p, image.grid.voxel_volume)


def phase_from_trajectory(params: MixtureParams, m: int) -> PhaseCoeffs:
    """Phase coefficients from the breathing harmonics of ridge ``m``.

    A Doppler term Re[c_n exp(j n w t)] integrates to the phase
    2 pi Re[c_n exp(j n w t) / (j n w)]; the constant and linear Doppler
    terms belong to the scan geometry and are left out.
    """
    w = float(params.omega_r)
    if w == 0.0:
        return PhaseCoeffs(0j, 0j, 0.0)
    c = np.asarray(params.C[m], dtype=float)
    c1 = complex(c[1], c[2])
    c2 = complex(c[3], c[4])
    return PhaseCoeffs(2 * np.pi * c1 / (1j * w), 2 * np.pi * c2 / (2j * w), w)


def _crop_rows(grid: ImageGrid, antenna: np.ndarray, center_range: float | None,
               halfwidth: float | None) -> np.ndarray:
    pts = grid.points()
    if center_range is None or halfwidth is None:
        return np.arange(len(pts))
    r = np.linalg.norm(pts - antenna, axis=1)
    rows = np.nonzero(np.abs(r - center_range) <= halfwidth)[0]
    return rows if len(rows) else np.arange(len(pts))


def optimize_phase(
    cube_nm: SignalCube, traj: ScanTrajectory, grid: ImageGrid, window: TimeWindow,
    init: PhaseCoeffs, omega_r: float | None = None, *,
    crop_center_range: float | None = None, crop_halfwidth: float | None = None,
    range_resolution: float | None = None,
) -> FocusResult:
    """Search the harmonic phase coefficients that make the echo image sharpest.

    The search runs Nelder-Mead over (Re b1, Im b1, Re b2, Im b2) from
    ``init`` and again from the best of zero and a coarse scan over the
    first-harmonic coefficient. The sharpness is evaluated on voxels whose
    range from the window-centre antenna position lies within
    ``crop_halfwidth`` of ``crop_center_range``; when only
    ``crop_center_range`` is given the half width defaults to five range
    resolutions. Candidates are compared on the full grid, and the initial
    and zero phases are always candidates, so the result is never less sharp
    than either.
    """
    if not np.any(cube_nm.values):
        raise FocusError("cannot focus an all-zero echo cube")
    w = init.omega_r if omega_r is None else float(omega_r)
    idx = window_indices(cube_nm, window)
    times = cube_nm.times[idx]

    a_full, misses = contribution_matrix(cube_nm, traj, grid.points(), window)
    if crop_center_range is not None and crop_halfwidth is None and range_resolution is not None:
        crop_halfwidth = CROP_RESOLUTIONS * range_resolution
    antenna = antenna_position(traj, np.clip(window.center, 0.0, traj.duration))
    rows = _crop_rows(grid, antenna, crop_center_range, crop_halfwidth)
    # the search runs in single precision; candidates are ranked in double
    a_crop = a_full[rows].astype(np.complex64)
    dv = grid.voxel_volume

    def image_power(a: np.ndarray, x: np.ndarray) -> np.ndarray:
        rot = np.exp(-1j * PhaseCoeffs.from_vector(x, w).phase(times)).astype(a.dtype)
        img = a @ rot
        return img.real.astype(float) ** 2 + img.imag.astype(float) ** 2

    def sharpness(a: np.ndarray, x: np.ndarray) -> float:
        p = image_power(a, x)
        total = p.sum()
        return 0.0 if total <= 0 else float(np.sum(p * p)) / (total * total) / dv

    def cost(x):
        return -sharpness(a_crop, x)

    x_init = init.as_vector()
    candidates = [x_init, np.zeros(4)]
    # the second start is the best of zero and a coarse first-harmonic scan
    scan = [np.zeros(4)] + [
        np.array([a * np.cos(q), a * np.sin(q), 0.0, 0.0])
        for a in SCAN_AMPLITUDES for q in np.arange(SCAN_PHASES) * 2 * np.pi / SCAN_PHASES
    ]
    x_restart = max(scan, key=lambda x: sharpness(a_crop, x))
    for x0 in (x_init, x_restart):
        simplex = np.vstack([x0, x0 + SIMPLEX_STEP * np.eye(4)])
        res = minimize(cost, x0, method="Nelder-Mead", options={
            "initial_simplex": simplex, "xatol": SIMPLEX_TOL, "fatol": np.inf,
            "maxfev": MAX_EVALS,
        })
        candidates.append(np.asarray(res.x, dtype=float))

    scores = [sharpness(a_full, x) for x in candidates]
    if scores[1] <= 0:
        raise FocusError("echo image is empty on the imaging grid")
    best = int(np.argmax(scores))
    coeffs = PhaseCoeffs.from_vector(candidates[best], w)
    phase = coeffs.phase(times)
    image = SarImage(grid, a_full @ np.exp(-1j * phase), misses)
    return FocusResult(image, phase, scores[1], scores[best], coeffs)


def integrate_images(images: Sequence[SarImage]) -> IntensityVolume:
    """Incoherent sum of squared magnitudes over sub-images on one grid."""
    if len(images) == 0:
        raise ShapeError("need at least one image to integrate")
    grid = images[0].grid
    total = np.zeros(grid.dims)
    for img in images:
        if not img.grid.same_as(grid):
            raise ShapeError("all images must share one grid")
        v = img.values
        total += v.real**2 + v.imag**2
    return IntensityVolume(grid, total)
