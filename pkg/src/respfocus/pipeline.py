"""Sliding-window driver: separation, autofocus and fusion per window, plus metrics."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tfsep
from .autofocus import integrate_images, mb_sharpness, optimize_phase, phase_from_trajectory
from .errors import ConfigurationError, RespFocusError
from .evaluation import (
    DEFAULT_ITH_FRACTION,
    MetricsReport,
    PointCloud,
    extract_scattering_points,
    image_correlation,
    load_point_cloud,
    merge_point_clouds,
    rmse,
    save_point_cloud,
    save_report,
)
from .imaging import ImageGrid, IntensityVolume, TimeWindow, backproject, load_image, save_image
from .scene import (
    RadarConfig,
    RespiratoryMotion,
    ScanTrajectory,
    Scene,
    antenna_position,
    default_radar,
    load_scene,
)
from .simulator import CubeAxes, SignalCube, cube_slice, simulate_cube
from .spatial import (
    DEFAULT_SIGMA_A,
    DEFAULT_SIGMA_R,
    apply_spatial_separation,
    find_local_maxima,
    power_map,
    save_maxima_csv,
)

log = logging.getLogger("respfocus")

RANGE_MARGIN_BINS = 6


class StageError(RespFocusError):
    """An error annotated with the pipeline stage that raised it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[stage={stage}] {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    scene_path: str | None = None
    radar: RadarConfig = field(default_factory=default_radar)
    trajectory: ScanTrajectory | None = None
    window_length: float = 8.0
    overlap: float = 7.2
    angle_bins: int = 32
    s_th_peak_fraction: float = 0.1
    s_th_median_factor: float = 4.0
    s_th: float | None = None  # absolute threshold; overrides the policy when set
    i_th_fraction: float = DEFAULT_ITH_FRACTION
    stft_window: int = tfsep.DEFAULT_WINDOW_LEN
    stft_hop: int = tfsep.DEFAULT_HOP
    stft_fft: int = tfsep.DEFAULT_FFT_LEN
    sigma: float = tfsep.DEFAULT_SIGMA
    sigma_r: float = DEFAULT_SIGMA_R
    sigma_a: float = float(DEFAULT_SIGMA_A)
    alpha: float = tfsep.DEFAULT_ALPHA
    m_max: int = 2
    grid: ImageGrid | None = None
    output_dir: str = "out"
    seed: int = 0
    base_dir: Path = field(default_factory=Path.cwd, repr=False)

    def __post_init__(self):
        if not 0 <= self.overlap < self.window_length:
            raise ConfigurationError("need 0 <= overlap < window length")
        if self.m_max < 1:
            raise ConfigurationError("M_max must be >= 1")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "PipelineConfig":
        known = {
            "window_s": "window_length", "overlap_s": "overlap", "angle_bins": "angle_bins",
            "i_th_fraction": "i_th_fraction", "sigma_hz": "sigma", "sigma_r_m": "sigma_r",
            "sigma_a_rad": "sigma_a", "alpha": "alpha", "m_max": "m_max",
            "output_dir": "output_dir", "seed": "seed",
        }
        kwargs: dict = {v: d[k] for k, v in known.items() if k in d}
        if "scene" in d:
            kwargs["scene_path"] = d["scene"]
        if "radar" in d:
            kwargs["radar"] = RadarConfig.from_dict(d["radar"])
        if "trajectory" in d:
            kwargs["trajectory"] = ScanTrajectory.from_dict(d["trajectory"])
        s_th = d.get("s_th", {})
        if isinstance(s_th, (int, float)):
            kwargs["s_th"] = float(s_th)
        else:
            kwargs["s_th_peak_fraction"] = s_th.get("peak_fraction", 0.1)
            kwargs["s_th_median_factor"] = s_th.get("median_factor", 4.0)
        stft = d.get("stft", {})
        kwargs["stft_window"] = stft.get("window_len", tfsep.DEFAULT_WINDOW_LEN)
        kwargs["stft_hop"] = stft.get("hop", tfsep.DEFAULT_HOP)
        kwargs["stft_fft"] = stft.get("fft_len", tfsep.DEFAULT_FFT_LEN)
        if "grid" in d:
            g = d["grid"]
            if "origin_m" in g:
                kwargs["grid"] = ImageGrid.from_dict(g)
            else:
                kwargs["grid"] = ImageGrid.centered(g["center_m"], g["half_extent_m"], g["spacing_m"])
        if base_dir is not None:
            kwargs["base_dir"] = Path(base_dir)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "scene": self.scene_path,
            "radar": self.radar.to_dict(),
            "trajectory": None if self.trajectory is None else self.trajectory.to_dict(),
            "window_s": self.window_length,
            "overlap_s": self.overlap,
            "angle_bins": self.angle_bins,
            "s_th": self.s_th if self.s_th is not None else {
                "peak_fraction": self.s_th_peak_fraction,
                "median_factor": self.s_th_median_factor,
            },
            "i_th_fraction": self.i_th_fraction,
            "stft": {"window_len": self.stft_window, "hop": self.stft_hop, "fft_len": self.stft_fft},
            "sigma_hz": self.sigma,
            "sigma_r_m": self.sigma_r,
            "sigma_a_rad": self.sigma_a,
            "alpha": self.alpha,
            "m_max": self.m_max,
            "grid": None if self.grid is None else self.grid.to_dict(),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def load_scene(self) -> Scene:
        if self.scene_path is None:
            raise ConfigurationError("config names no scene file")
        scene = load_scene(self.resolve(self.scene_path))
        return replace(scene, rng_seed=self.seed)


def load_config(path: str | Path | None = None) -> PipelineConfig:
    """Read a pipeline config; without a path, the shipped two-breather setup."""
    if path is None:
        ref = resources.files("respfocus") / "data" / "default_pipeline.json"
        with resources.as_file(ref) as p:
            return PipelineConfig.from_dict(json.loads(Path(p).read_text()), Path(p).parent)
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise StageError("config", f"cannot read {path}: {exc}") from exc
    return PipelineConfig.from_dict(d, path.parent)


def plan_windows(duration: float, window_length: float, overlap: float) -> list[TimeWindow]:
    """Windows starting at 0 with stride (length - overlap), each fully inside [0, T]."""
    if not 0 <= overlap < window_length:
        raise ConfigurationError("need 0 <= overlap < window length")
    if window_length > duration + 1e-9:
        raise ConfigurationError("window longer than the scan")
    stride = window_length - overlap
    count = int(math.floor((duration - window_length) / stride + 1e-9)) + 1
    return [TimeWindow(k * stride + window_length / 2.0, window_length) for k in range(count)]


def parse_window_range(text: str, count: int) -> list[int]:
    """Indices from 'a:b' (half-open), 'a:' or a single index 'a'."""
    try:
        if ":" in text:
            lo, hi = text.split(":", 1)
            idx = range(int(lo) if lo else 0, int(hi) if hi else count)
        else:
            idx = range(int(text), int(text) + 1)
    except ValueError as exc:
        raise ConfigurationError(f"bad window range {text!r}") from exc
    out = [i for i in idx if 0 <= i < count]
    if not out:
        raise ConfigurationError(f"window range {text!r} selects nothing out of {count}")
    return out


def cube_axes_for(cfg: PipelineConfig, traj: ScanTrajectory, grid: ImageGrid) -> CubeAxes:
    """Range span covering every voxel from every antenna position, with a margin."""
    dr = cfg.radar.range_resolution / 2.0
    pts = grid.points()
    lo, hi = np.inf, 0.0
    for t in np.linspace(0.0, traj.duration, 33):
        r = np.linalg.norm(pts - antenna_position(traj, t), axis=1)
        lo, hi = min(lo, r.min()), max(hi, r.max())
    offset = max(dr, lo - RANGE_MARGIN_BINS * dr)
    n = int(math.ceil((hi + RANGE_MARGIN_BINS * dr - offset) / dr)) + 1
    return CubeAxes(range_offset=offset, num_range_bins=n, angle_bins=cfg.angle_bins)


def still_scene(scene: Scene) -> Scene:
    """The same scatterers without breathing or noise."""
    return Scene(
        tuple(replace(s, motion=RespiratoryMotion.stationary()) for s in scene.scatterers),
        0.0, scene.rng_seed,
    )


def spatial_threshold(cfg: PipelineConfig, values: np.ndarray) -> float:
    if cfg.s_th is not None:
        return cfg.s_th
    return max(cfg.s_th_peak_fraction * float(values.max()),
               cfg.s_th_median_factor * float(np.median(values)))


def intensity_threshold(cfg: PipelineConfig, volume: IntensityVolume) -> float:
    return cfg.i_th_fraction * float(volume.values.max())


@dataclass
class WindowResult:
    index: int
    conventional: IntensityVolume | None = None
    proposed: IntensityVolume | None = None
    reference: IntensityVolume | None = None
    points_conventional: PointCloud = field(default_factory=PointCloud.empty)
    points_proposed: PointCloud = field(default_factory=PointCloud.empty)
    echoes: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    counts: dict = field(default_factory=lambda: {"conventional": Counter(), "proposed": Counter()})
    skipped: bool = False


def conventional_window(cube: SignalCube, traj: ScanTrajectory, grid: ImageGrid,
                        window: TimeWindow, counts: Counter) -> IntensityVolume:
    """Single backprojection of the raw cube with no motion compensation, as |I|^2."""
    counts["backprojection"] += 1
    img = backproject(cube, traj, grid, window)
    return IntensityVolume(grid, np.abs(img.values) ** 2)


def shared_omega(fits: Sequence[tfsep.MixtureParams]) -> float:
    """Breathing rate of the ridge with the widest respiratory Doppler excursion.

    Every echo in a window comes from one breathing subject. Ridges whose
    excursion is below the ridge width cannot pin the rate down, so all echoes
    use the rate fitted on the most strongly modulated ridge.
    """
    best, omega = -1.0, fits[0].omega_r
    for p in fits:
        for c in p.C:
            excursion = np.hypot(c[1], c[2]) + 2 * np.hypot(c[3], c[4])
            if excursion > best:
                best, omega = excursion, p.omega_r
    return float(omega)


def proposed_window(cfg: PipelineConfig, cube: SignalCube, traj: ScanTrajectory,
                    grid: ImageGrid, window: TimeWindow, counts: Counter,
                    progress) -> tuple[IntensityVolume | None, list, list[dict]]:
    """Separate, focus and fuse one window. Returns (I_p or None, maxima, echo summaries)."""
    progress("power_map")
    counts["power_map"] += 1
    sub = cube_slice(cube, window)
    pmap = power_map(sub)
    maxima = find_local_maxima(pmap, spatial_threshold(cfg, pmap.values))
    if not maxima:
        return None, maxima, []
    progress("spatial_separation")
    counts["spatial_separation"] += 1
    separated = apply_spatial_separation(sub, maxima, cfg.sigma_r, cfg.sigma_a)

    fits = []
    for n, (mx, cube_n) in enumerate(zip(maxima, separated)):
        progress(f"em_fit n={n}")
        counts["em_fit"] += 1
        spec = tfsep.cube_spectrogram(cube_n, mx.r, mx.theta, cfg.stft_window, cfg.stft_hop,
                                      cfg.stft_fft)
        fits.append(tfsep.select_model(spec, cfg.sigma, cfg.m_max, cfg.alpha, seed=cfg.seed))
    omega = shared_omega(fits)

    images, echoes = [], []
    for n, (mx, cube_n, params) in enumerate(zip(maxima, separated, fits)):
        counts["tf_separation"] += 1
        parts = tfsep.apply_tf_separation(cube_n, params, cfg.stft_window, cfg.stft_hop,
                                          cfg.stft_fft)
        for m, cube_nm in enumerate(parts):
            progress(f"phase_optimization n={n} m={m}")
            counts["phase_optimization"] += 1
            init = phase_from_trajectory(replace(params, omega_r=omega), m)
            result = optimize_phase(
                cube_nm, traj, grid, window, init, omega,
                crop_center_range=mx.r, range_resolution=cfg.radar.range_resolution,
            )
            images.append(result.image)
            summary = result.summary(n, m)
            summary["mixture"] = params.to_dict()
            echoes.append(summary)
    progress("fusion")
    counts["fusion"] += 1
    return integrate_images(images), maxima, echoes


def _process_window(args) -> WindowResult:
    cfg, cube, still, traj, grid, index, window, n_windows, out_dir = args
    res = WindowResult(index)

    def progress(stage: str):
        log.info("window=%d/%d stage=%s", index + 1, n_windows, stage)

    wdir = out_dir / f"window_{index:03d}"
    wdir.mkdir(parents=True, exist_ok=True)
    try:
        progress("conventional")
        res.conventional = conventional_window(cube, traj, grid, window, res.counts["conventional"])
        if still is not None:
            res.reference = IntensityVolume(
                grid, np.abs(backproject(still, traj, grid, window).values) ** 2)
        proposed, maxima, res.echoes = proposed_window(
            cfg, cube, traj, grid, window, res.counts["proposed"], progress)
        save_maxima_csv(maxima, wdir / "maxima.csv")
        if proposed is None:
            res.warnings.append(f"window {index}: no range-angle maxima above threshold")
            res.skipped = True
        else:
            res.proposed = proposed
            for name in ("conventional", "proposed"):
                vol = getattr(res, name)
                if vol.values.max() > 0:
                    setattr(res, f"points_{name}",
                            extract_scattering_points(vol, intensity_threshold(cfg, vol)))
    except RespFocusError as exc:
        res.warnings.append(f"window {index}: {type(exc).__name__}: {exc}")
        res.skipped = True
    _save_window(res, wdir)
    return res


def _save_window(res: WindowResult, wdir: Path) -> None:
    for name in ("conventional", "proposed", "reference"):
        vol = getattr(res, name)
        if vol is not None:
            save_image(vol, wdir / f"{name}.bin")
    save_point_cloud(res.points_conventional, wdir / "points_conventional.csv")
    save_point_cloud(res.points_proposed, wdir / "points_proposed.csv")
    (wdir / "echoes.json").write_text(json.dumps(res.echoes, indent=2))
    status = {
        "index": res.index, "skipped": res.skipped, "warnings": res.warnings,
        "stage_counts": {k: dict(sorted(v.items())) for k, v in res.counts.items()},
    }
    (wdir / "status.json").write_text(json.dumps(status, indent=2))


def load_window_results(out_dir: str | Path) -> list[WindowResult]:
    """Per-window results as written by :func:`focus_windows` (volumes in float32)."""
    results = []
    for wdir in sorted(Path(out_dir).glob("window_*")):
        status_path = wdir / "status.json"
        if not status_path.exists():
            continue
        status = json.loads(status_path.read_text())
        res = WindowResult(status["index"], skipped=status["skipped"],
                           warnings=list(status["warnings"]))
        res.counts = {k: Counter(v) for k, v in status["stage_counts"].items()}
        for name in ("conventional", "proposed", "reference"):
            if (wdir / f"{name}.bin").exists():
                setattr(res, name, load_image(wdir / f"{name}.bin"))
        res.points_conventional = load_point_cloud(wdir / "points_conventional.csv")
        res.points_proposed = load_point_cloud(wdir / "points_proposed.csv")
        res.echoes = json.loads((wdir / "echoes.json").read_text())
        results.append(res)
    return results


def _safe(fn, *args):
    try:
        return fn(*args)
    except RespFocusError:
        return None


def _mean(values) -> float | None:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _setup(cfg: PipelineConfig, windows: Sequence[int] | None):
    try:
        scene = cfg.load_scene()
        traj = cfg.trajectory
        if traj is None or cfg.grid is None:
            raise ConfigurationError("config needs a trajectory and an imaging grid")
        plan = plan_windows(traj.duration, cfg.window_length, cfg.overlap)
        selected = list(range(len(plan))) if windows is None else list(windows)
        if any(not 0 <= i < len(plan) for i in selected):
            raise ConfigurationError(f"window index outside 0..{len(plan) - 1}")
    except RespFocusError as exc:
        raise StageError("config", str(exc)) from exc
    return scene, traj, plan, selected


def simulate(cfg: PipelineConfig, scene: Scene | None = None) -> SignalCube:
    """The echo cube of the configured scene over the whole scan."""
    try:
        scene = cfg.load_scene() if scene is None else scene
        return simulate_cube(scene, cfg.radar, cfg.trajectory,
                             cube_axes_for(cfg, cfg.trajectory, cfg.grid))
    except RespFocusError as exc:
        raise StageError("simulate", str(exc)) from exc


def focus_windows(cfg: PipelineConfig, out: Path, *, cube: SignalCube | None = None,
                  windows: Sequence[int] | None = None, workers: int = 1) -> list[WindowResult]:
    """Conventional and proposed imaging of every selected window, written under ``out``."""
    scene, traj, plan, selected = _setup(cfg, windows)
    out.mkdir(parents=True, exist_ok=True)
    log.info("stage=simulate")
    if cube is None:
        cube = simulate(cfg, scene)
    still = simulate(cfg, still_scene(scene)) if scene.scatterers else None
    jobs = [(cfg, cube, still, traj, cfg.grid, i, plan[i], len(plan), out) for i in selected]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_process_window, jobs))
    return [_process_window(j) for j in jobs]


def evaluate_results(cfg: PipelineConfig, results: Sequence[WindowResult], out: Path,
                     truth: PointCloud | None = None) -> MetricsReport:
    """Reduce per-window results, in window order, into the run report."""
    scene, traj, plan, _ = _setup(cfg, None)
    truth = PointCloud(scene.positions()) if truth is None else truth
    results = sorted(results, key=lambda r: r.index)
    ok = [r for r in results if not r.skipped]
    warnings = [w for r in results for w in r.warnings]
    pitch = cfg.grid.spacing
    merged_prop = merge_point_clouds([r.points_proposed for r in ok], pitch)
    merged_conv = merge_point_clouds([r.points_conventional for r in ok], pitch)
    out.mkdir(parents=True, exist_ok=True)
    save_point_cloud(merged_prop, out / "points_proposed.csv")
    save_point_cloud(merged_conv, out / "points_conventional.csv")
    if len(merged_prop) == 0:
        warnings.append("proposed point cloud is empty")
    if len(truth) == 0:
        warnings.append("scene has no scatterers; RMSE undefined")

    counts = {"conventional": Counter(), "proposed": Counter()}
    per_window = []
    for r in results:
        for path in counts:
            counts[path].update(r.counts.get(path, {}))
        entry = {"index": r.index, "center_s": plan[r.index].center, "skipped": r.skipped}
        if not r.skipped:
            entry.update(
                mb_sharpness_conventional=_safe(mb_sharpness, r.conventional),
                mb_sharpness_proposed=_safe(mb_sharpness, r.proposed),
                points_proposed=len(r.points_proposed),
                points_conventional=len(r.points_conventional),
                echoes=len(r.echoes),
            )
        per_window.append(entry)

    with_ref = [r for r in ok if r.reference is not None]
    report = MetricsReport(
        mb_sharpness_conventional=_mean(e.get("mb_sharpness_conventional") for e in per_window),
        mb_sharpness_proposed=_mean(e.get("mb_sharpness_proposed") for e in per_window),
        rmse_conventional=_safe(rmse, merged_conv, truth),
        rmse_proposed=_safe(rmse, merged_prop, truth),
        correlation=_mean(_safe(image_correlation, r.proposed, r.reference) for r in with_ref),
        window_count=len(plan),
        correlation_conventional=_mean(
            _safe(image_correlation, r.conventional, r.reference) for r in with_ref),
        windows_processed=len(ok),
        windows_skipped=len(results) - len(ok),
        warnings=warnings,
        stage_counts={k: dict(sorted(v.items())) for k, v in counts.items()},
        per_window=per_window,
    )
    for w in warnings:
        log.warning(w)
    save_report(report, out / "report.json")
    return report


def run_pipeline(cfg: PipelineConfig, *, windows: Sequence[int] | None = None,
                 workers: int = 1, out_dir: str | Path | None = None,
                 cube: SignalCube | None = None) -> MetricsReport:
    """Simulate, image every window both ways and write ``report.json``."""
    out = Path(out_dir) if out_dir is not None else cfg.resolve(cfg.output_dir)
    results = focus_windows(cfg, out, cube=cube, windows=windows, workers=workers)
    return evaluate_results(cfg, results, out)
