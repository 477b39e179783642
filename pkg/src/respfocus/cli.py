"""Command line entry point: ``respfocus {simulate,focus,evaluate,pipeline}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import RespFocusError
from .pipeline import (
    StageError,
    evaluate_results,
    focus_windows,
    load_config,
    load_window_results,
    parse_window_range,
    plan_windows,
    run_pipeline,
    simulate,
)
from .scene import save_scene
from .simulator import load_cube, save_cube

log = logging.getLogger("respfocus")


def _common(p: argparse.ArgumentParser, windows: bool = False) -> None:
    p.add_argument("--config", help="pipeline config JSON (default: shipped two-breather scene)")
    p.add_argument("--out", help="output directory (default: the config's output_dir)")
    p.add_argument("--seed", type=int, help="seed for noise and EM restarts (overrides config)")
    if windows:
        p.add_argument("--windows", help="window indices as 'a:b', 'a:' or 'a'")
        p.add_argument("--workers", type=int, default=1, help="processes for window-level parallelism")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="respfocus", description=__doc__)
    verbosity = ap.add_mutually_exclusive_group()
    verbosity.add_argument("--quiet", action="store_true", help="only warnings and errors")
    verbosity.add_argument("--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("simulate", help="scene -> echo cube files"))
    p = sub.add_parser("focus", help="cube -> per-window volumes and point clouds")
    _common(p, windows=True)
    p.add_argument("--cube", help="cube .bin/.json base path (default: simulate from the scene)")
    _common(sub.add_parser("evaluate", help="volumes + ground truth -> report.json"))
    _common(sub.add_parser("pipeline", help="simulate, focus and evaluate"), windows=True)
    return ap


def _setup_logging(args) -> None:
    level = logging.WARNING if args.quiet else logging.DEBUG if args.verbose else logging.INFO
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out) if args.out else cfg.resolve(cfg.output_dir)
    return cfg, out


def _windows(args, cfg):
    if not getattr(args, "windows", None):
        return None
    n = len(plan_windows(cfg.trajectory.duration, cfg.window_length, cfg.overlap))
    return parse_window_range(args.windows, n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args)
    stage = "config"
    try:
        cfg, out = _config(args)
        windows = _windows(args, cfg)
        if args.command == "simulate":
            stage = "simulate"
            out.mkdir(parents=True, exist_ok=True)
            save_cube(simulate(cfg), out / "cube")
            save_scene(cfg.load_scene(), out / "scene.json")
            log.info("wrote %s", out / "cube.bin")
        elif args.command == "focus":
            stage = "focus"
            cube = load_cube(args.cube) if args.cube else None
            focus_windows(cfg, out, cube=cube, windows=windows, workers=args.workers)
        elif args.command == "evaluate":
            stage = "evaluate"
            results = load_window_results(out)
            if not results:
                raise StageError("evaluate", f"no window results under {out}")
            report = evaluate_results(cfg, results, out)
            print(report.to_json())
        else:
            stage = "pipeline"
            report = run_pipeline(cfg, windows=windows, workers=args.workers, out_dir=out)
            print(report.to_json())
    except StageError as exc:
        print(f"respfocus: error {exc}", file=sys.stderr)
        return 2
    except (RespFocusError, OSError) as exc:
        print(f"respfocus: error [stage={stage}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
