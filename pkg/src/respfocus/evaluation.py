"""Point extraction, nearest-neighbour RMSE, image correlation and metric reports."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autofocus import mb_sharpness
from .errors import ConfigurationError, ShapeError, UndefinedMetricError
from .imaging import ImageGrid, IntensityVolume, SarImage

DEFAULT_ITH_FRACTION = 0.25


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 3)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ConfigurationError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))


@dataclass
class MetricsReport:
    """Headline metrics plus run bookkeeping.

    Metrics that are undefined for a run (for example RMSE of an empty
    cloud) are ``None``. ``correlation`` compares the proposed volume with the reference image and
    ``correlation_conventional`` does the same for the baseline.
    """

    mb_sharpness_conventional: float | None
    mb_sharpness_proposed: float | None
    rmse_conventional: float | None
    rmse_proposed: float | None
    correlation: float | None
    window_count: int
    correlation_conventional: float | None = None
    windows_processed: int = 0
    windows_skipped: int = 0
    warnings: list[str] = field(default_factory=list)
    stage_counts: dict = field(default_factory=dict)
    per_window: list[dict] = field(default_factory=list)

    @property
    def sharpness_ratio(self) -> float | None:
        if not self.mb_sharpness_conventional or self.mb_sharpness_proposed is None:
            return None
        return self.mb_sharpness_proposed / self.mb_sharpness_conventional

    def to_dict(self, digits: int = 12) -> dict:
        return _round_floats(asdict(self), digits)

    def to_json(self, digits: int = 12) -> str:
        return json.dumps(self.to_dict(digits), indent=2, sort_keys=True)


def _round_floats(obj, digits: int):
    if isinstance(obj, float):
        return float(f"{obj:.{digits}g}") if np.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v, digits) for v in obj]
    if isinstance(obj, np.generic):
        return _round_floats(obj.item(), digits)
    return obj


def extract_scattering_points(volume: IntensityVolume | SarImage, i_th: float) -> PointCloud:
    """Voxel centres strictly above all 26 neighbours and at least ``i_th``.

    Border voxels qualify when they beat the neighbours that exist.
    """
    if not i_th > 0:
        raise ConfigurationError("I_th must be > 0")
    v = volume.values
    if np.iscomplexobj(v):
        v = np.abs(v) ** 2
    padded = np.pad(v, 1, mode="constant", constant_values=-np.inf)
    is_max = v >= i_th
    nx, ny, nz = v.shape
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                if dx == dy == dz == 0:
                    continue
                nb = padded[1 + dx:1 + dx + nx, 1 + dy:1 + dy + ny, 1 + dz:1 + dz + nz]
                is_max &= v > nb
    idx = np.argwhere(is_max)
    grid = volume.grid
    return PointCloud(grid.origin + idx * grid.spacing)


def merge_point_clouds(clouds: Sequence[PointCloud], pitch) -> PointCloud:
    """Union of per-window clouds; points closer than half a pitch merge to their centroid.

    Points are grouped transitively (single linkage) on the per-axis test
    |dx_i| <= pitch_i / 2, then each group is replaced by its mean.
    """
    pitch = np.broadcast_to(np.asarray(pitch, dtype=float), (3,))
    pts = np.concatenate([c.points for c in clouds]) if clouds else np.zeros((0, 3))
    if len(pts) == 0:
        return PointCloud.empty()
    close = np.all(np.abs(pts[:, None, :] - pts[None, :, :]) <= pitch / 2 + 1e-12, axis=2)
    label = -np.ones(len(pts), dtype=int)
    n_groups = 0
    for i in range(len(pts)):
        if label[i] >= 0:
            continue
        stack = [i]
        label[i] = n_groups
        while stack:
            j = stack.pop()
            for k in np.nonzero(close[j] & (label < 0))[0]:
                label[k] = n_groups
                stack.append(k)
        n_groups += 1
    merged = np.array([pts[label == g].mean(axis=0) for g in range(n_groups)])
    return PointCloud(merged)


def rmse(est: PointCloud, ref: PointCloud) -> float:
    """sqrt(mean over est of the squared distance to the nearest ref point)."""
    if len(est) == 0 or len(ref) == 0:
        raise UndefinedMetricError("RMSE needs nonempty estimated and reference clouds")
    d2 = np.sum((est.points[:, None, :] - ref.points[None, :, :]) ** 2, axis=2)
    return float(np.sqrt(np.mean(d2.min(axis=1))))


def _magnitudes(x) -> tuple[np.ndarray, ImageGrid | None]:
    if isinstance(x, IntensityVolume):
        return np.sqrt(np.maximum(x.values, 0.0)), x.grid
    if isinstance(x, SarImage):
        return np.abs(x.values), x.grid
    x = np.asarray(x)
    return (np.abs(x) if np.iscomplexobj(x) else x.astype(float)), None


def image_correlation(a, b) -> float:
    """Pearson correlation of voxelwise magnitudes.

    Complex images contribute |I|, intensity volumes sqrt(P) and plain real
    arrays their values as given.
    """
    ma, ga = _magnitudes(a)
    mb, gb = _magnitudes(b)
    if ma.shape != mb.shape or (ga is not None and gb is not None and not ga.same_as(gb)):
        raise ShapeError("images must share one grid")
    da = ma.ravel() - ma.mean()
    db = mb.ravel() - mb.mean()
    na, nb = np.sqrt(da @ da), np.sqrt(db @ db)
    if na == 0 or nb == 0:
        raise UndefinedMetricError("correlation of a constant image is undefined")
    return float(np.clip((da @ db) / (na * nb), -1.0, 1.0))


def sharpness_report(
    conventional: IntensityVolume | Sequence[IntensityVolume],
    proposed: IntensityVolume | Sequence[IntensityVolume],
    *, rmse_conventional: float | None = None, rmse_proposed: float | None = None,
    correlation: float | None = None, correlation_conventional: float | None = None,
) -> MetricsReport:
    """Average MB sharpness of each method across windows, plus the given metrics."""
    conv = [conventional] if isinstance(conventional, (IntensityVolume, SarImage)) else list(conventional)
    prop = [proposed] if isinstance(proposed, (IntensityVolume, SarImage)) else list(proposed)
    if len(conv) != len(prop) or not conv:
        raise ShapeError("need matching, nonempty per-window volume lists")
    for c, p in zip(conv, prop):
        if not c.grid.same_as(p.grid):
            raise ShapeError("conventional and proposed volumes must share one grid")
    return MetricsReport(
        mb_sharpness_conventional=float(np.mean([mb_sharpness(c) for c in conv])),
        mb_sharpness_proposed=float(np.mean([mb_sharpness(p) for p in prop])),
        rmse_conventional=rmse_conventional,
        rmse_proposed=rmse_proposed,
        correlation=correlation,
        window_count=len(conv),
        correlation_conventional=correlation_conventional,
    )


def save_point_cloud(cloud: PointCloud, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x_m", "y_m", "z_m"])
        for p in cloud.points:
            writer.writerow([repr(float(v)) for v in p])


def load_point_cloud(path: str | Path) -> PointCloud:
    with open(path, newline="") as fh:
        rows = [[float(r["x_m"]), float(r["y_m"]), float(r["z_m"])] for r in csv.DictReader(fh)]
    return PointCloud(np.array(rows).reshape(-1, 3))


def save_report(report: MetricsReport, path: str | Path) -> None:
    Path(path).write_text(report.to_json() + "\n")
