"""Command-line entry point: ``gsweather {simulate,render,presets,ablate-collisions}``."""
from __future__ import annotations

import argparse
import json
import sys
import time

from . import __version__
from .mpm.particles import ConfigError
from .mpm.solver import SimulationError
from .pipeline import (
    list_presets,
    load_run_config,
    parse_frame_range,
    run_ablation,
    run_render,
    run_simulate,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gsweather", description="Dynamic weather effects for Gaussian splat scenes.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
        p.add_argument("--config", required=config_required, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--output", help="override the output directory")
        p.add_argument("--no-collision-handling", action="store_true", help="leave rest particles unresolved")
        p.add_argument("--transposed-rotation", action="store_true",
                       help="use V U^T instead of the polar rotation U V^T")
        p.add_argument("--parallel", action="store_true", help="multithreaded kernels (not bitwise reproducible)")

    p = sub.add_parser("simulate", help="run the simulation and write frame states")
    common(p)
    p.add_argument("--frames", help="frame count N or range 0..N-1")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("render", help="render stored frame states to PNG")
    common(p)
    p.add_argument("--frames", help="inclusive frame range a..b or a single frame k")

    p = sub.add_parser("presets", help="print effect presets")
    common(p, config_required=False)
    p.add_argument("--effect", action="append", help="only these effects")

    p = sub.add_parser("ablate-collisions", help="rest distance to the mesh with and without collision handling")
    common(p)
    p.add_argument("--frames", help="frame count N or range 0..N-1")
    return ap


def _sim_frames(text: str | None) -> int | None:
    if text is None:
        return None
    r = parse_frame_range(text if ".." in text else f"0..{int(text) - 1}")
    if r.start != 0:
        raise ConfigError("simulation always starts at frame 0")
    return len(r)


def _config(args, frames: int | None = None):
    cli = {
        "seed": args.seed,
        "output": args.output,
        "frames": frames,
        "collision_handling": False if args.no_collision_handling else None,
        "transposed_rotation": True if args.transposed_rotation else None,
        "parallel": True if args.parallel else None,
    }
    return load_run_config(args.config, **cli)


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True), flush=True)


def _run(args) -> int:
    if args.command == "presets":
        cfg = _config(args) if args.config else None
        print(list_presets(cfg, args.effect))
        return EXIT_OK
    if args.command == "simulate":
        cfg = _config(args, _sim_frames(args.frames))
        t0 = time.perf_counter()

        def progress(fo):
            if not args.quiet:
                print(f"frame {fo.state.frame}: active {fo.result.active}, emitted {fo.result.emitted}, "
                      f"rested {len(fo.result.events)}", file=sys.stderr, flush=True)

        summary = run_simulate(cfg, progress)
        summary["seconds"] = round(time.perf_counter() - t0, 3)
        _emit({"status": "ok", "command": "simulate", **summary})
        return EXIT_OK
    if args.command == "render":
        cfg = _config(args)
        frames = parse_frame_range(args.frames, cfg.frames)
        paths = run_render(cfg, frames)
        _emit({"status": "ok", "command": "render", "images": len(paths),
               "output": str(cfg.output / "renders")})
        return EXIT_OK
    if args.command == "ablate-collisions":
        cfg = _config(args, _sim_frames(args.frames))
        report = run_ablation(cfg)
        _emit({"status": "ok", "command": "ablate-collisions", **report})
        return EXIT_OK
    raise ConfigError(f"unknown command {args.command}")


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _run(args)
    except ConfigError as exc:
        code, kind = EXIT_CONFIG, "config"
        err = exc
    except SimulationError as exc:
        code, kind = EXIT_RUNTIME, "simulation"
        err = exc
    except (OSError, ValueError) as exc:
        code, kind = EXIT_RUNTIME, "io" if isinstance(exc, OSError) else "input"
        err = exc
    payload = {"status": "error", "kind": kind, "type": type(err).__name__, "message": str(err)}
    frame = getattr(err, "frame", None)
    if frame is not None:
        payload["frame"] = frame
    particle = getattr(err, "particle_id", None)
    if particle is not None:
        payload["particle_id"] = particle
    print(json.dumps(payload, sort_keys=True), file=sys.stderr, flush=True)
    return code


if __name__ == "__main__":
    sys.exit(main())
