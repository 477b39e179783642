"""Range-angle echo separation: power map, local maxima and Gaussian weights."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptySetError
from .simulator import SignalCube, window_indices

DEFAULT_SIGMA_R = 0.02
DEFAULT_SIGMA_A = np.deg2rad(6.4)


@dataclass(frozen=True)
class PowerMap:
    values: np.ndarray  # (range_bin, angle_bin)
    range_axis: np.ndarray
    angle_grid: np.ndarray


@dataclass(frozen=True)
class LocalMaximum:
    r: float
    theta: float
    power: float
    range_index: int = -1
    angle_index: int = -1


def power_map(cube: SignalCube, window=None) -> PowerMap:
    """Accumulated power sum_t |s|^2 / f_s over the window (whole cube if None)."""
    idx = slice(None) if window is None else window_indices(cube, window)
    v = cube.values[:, :, idx]
    p = np.sum(v.real**2 + v.imag**2, axis=2) / cube.sample_rate
    return PowerMap(p, cube.range_axis, cube.angle_grid)


def find_local_maxima(pmap: PowerMap, s_th: float) -> list[LocalMaximum]:
    """Interior bins strictly above all 8 neighbours and at least ``s_th``.

    Sorted by descending power.
    """
    p = pmap.values
    if p.shape[0] < 3 or p.shape[1] < 3:
        return []
    core = p[1:-1, 1:-1]
    is_max = core >= s_th
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nb = p[1 + di:p.shape[0] - 1 + di, 1 + dj:p.shape[1] - 1 + dj]
            is_max &= core > nb
    ii, jj = np.nonzero(is_max)
    maxima = [
        LocalMaximum(float(pmap.range_axis[i + 1]), float(pmap.angle_grid[j + 1]),
                     float(p[i + 1, j + 1]), int(i + 1), int(j + 1))
        for i, j in zip(ii, jj)
    ]
    maxima.sort(key=lambda m: -m.power)
    return maxima


def spatial_weights(
    maxima: Sequence[LocalMaximum], r, theta,
    sigma_r: float = DEFAULT_SIGMA_R, sigma_a: float = DEFAULT_SIGMA_A,
) -> np.ndarray:
    """Normalised Gaussian weights; the first axis indexes the maxima.

    ``r`` and ``theta`` broadcast against each other; the result has shape
    ``(N,) + broadcast_shape``. Far from every maximum, where all Gaussians
    underflow, the weight goes entirely to the nearest maximum in
    resolution-scaled distance so the weights still sum to one.
    """
    if len(maxima) == 0:
        raise EmptySetError("no local maxima to build weights from")
    r, theta = np.broadcast_arrays(np.asarray(r, float), np.asarray(theta, float))
    rn = np.array([m.r for m in maxima]).reshape((-1,) + (1,) * r.ndim)
    tn = np.array([m.theta for m in maxima]).reshape((-1,) + (1,) * r.ndim)
    q = ((r - rn) / sigma_r) ** 2 + ((theta - tn) / sigma_a) ** 2
    # subtracting the per-point minimum avoids underflow without changing the ratios
    g = np.exp(-0.5 * (q - q.min(axis=0, keepdims=True)))
    return g / g.sum(axis=0, keepdims=True)


def apply_spatial_separation(
    cube: SignalCube, maxima: Sequence[LocalMaximum],
    sigma_r: float = DEFAULT_SIGMA_R, sigma_a: float = DEFAULT_SIGMA_A,
) -> list[SignalCube]:
    w = spatial_weights(
        maxima, cube.range_axis[:, None], cube.angle_grid[None, :], sigma_r, sigma_a
    )
    return [cube.with_values(cube.values * wn[:, :, None]) for wn in w]


def save_maxima_csv(maxima: Sequence[LocalMaximum], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["r_m", "theta_rad", "power"])
        for m in maxima:
            writer.writerow([repr(m.r), repr(m.theta), repr(m.power)])


def load_maxima_csv(path: str | Path) -> list[LocalMaximum]:
    with open(path, newline="") as fh:
        return [
            LocalMaximum(float(row["r_m"]), float(row["theta_rad"]), float(row["power"]))
            for row in csv.DictReader(fh)
        ]
