"""Command-line interface: ``structvo simulate | run | eval``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 tracking lost before 90% of the frames were processed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import PipelineConfig, load_config
from .evaluation import evaluate, read_tum, write_csv, write_svg, write_tum
from .exceptions import BadPreset, ConfigError, StructVOError
from .normals import DepthNormalProvider, FileNormalProvider, SimulatorNormalProvider
from .pipeline import StructureVO
from .sim.dataset import generate_sequence, load_dataset
from .sim.presets import PRESETS, get_preset
from .sim.world import PlanarScene, render_normals

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_LOST = 0, 2, 3, 4
LOST_FRACTION = 0.9

log = logging.getLogger("structvo")


def _setup_logging(level: str | None = None) -> None:
    name = (os.environ.get("STRUCTVO_LOG") or level or "WARNING").upper()
    logging.basicConfig(level=getattr(logging, name, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


# ---------------------------------------------------------------- simulate


def cmd_simulate(args) -> int:
    preset = get_preset(args.preset, args.seed, args.frames)
    if args.scene:
        try:
            scene = PlanarScene.from_dict(json.loads(Path(args.scene).read_text()))
        except (OSError, json.JSONDecodeError, KeyError) as e:
            raise ConfigError(f"cannot load scene {args.scene}: {e}") from e
        preset.scene = scene
    out = generate_sequence(preset, args.output, args.normal_scale, with_depth=args.with_depth)
    print(f"wrote {preset.trajectory.n_frames} frames of {preset.name} (seed {args.seed}) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- run


def _normal_source(spec: str, ds, cfg: PipelineConfig):
    kind, _, directory = spec.partition(":")
    if kind == "file":
        return FileNormalProvider(directory or ds.frames_dir)
    if kind == "depth":
        n = cfg.normals
        return DepthNormalProvider(directory or ds.frames_dir, ds.normal_K, n.window, n.residual_threshold,
                                   n.depth_divisor)
    if kind == "sim":
        scene, poses = ds.scene(), ds.gt.poses()
        return SimulatorNormalProvider(lambda i: render_normals(scene, poses[i], ds.normal_K, i),
                                       range(len(poses)))
    raise ConfigError(f"--normals must be file, sim or depth[:<dir>], got {spec!r}")


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(io={"seed": args.seed})
    if args.ablate == "no-lines":
        cfg = cfg.with_overrides(tracker={"use_lines": False})
    _setup_logging(cfg.io.log_level)
    spec = args.normals or cfg.normals.source + (f":{cfg.normals.directory}" if cfg.normals.directory else "")
    ds = load_dataset(args.dataset)
    normals = _normal_source(spec, ds, cfg)
    vo = StructureVO(ds.K, cfg, use_lines=cfg.tracker.use_lines)
    vo.fit((ds.frame(i) for i in ds.frame_ids()), normals)

    out = Path(args.output)
    write_tum(out, vo.trajectory_, f"structvo estimate of {ds.meta.get('preset', ds.root.name)}")
    header = dict(dataset=str(ds.root), normals=spec, ablation=args.ablate, n_frames=ds.n_frames,
                  n_processed=len(vo.records_))
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")
    log_path.write_text(vo.run_log(header))
    print(f"wrote {len(vo.records_)} poses to {out} and the run log to {log_path}")
    if vo.lost_ and vo.lost_at_ is not None and vo.lost_at_ < LOST_FRACTION * ds.n_frames:
        print(f"tracking lost at frame {vo.lost_at_}", file=sys.stderr)
        return EXIT_LOST
    return EXIT_OK


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    est, gt = read_tum(args.estimate), read_tum(args.groundtruth)
    report = evaluate(est, gt, args.max_dt, with_scale=not args.fix_scale)
    print(report.summary())
    print(report.TABLE_HEADER)
    print(report.table_row(args.name or Path(args.estimate).stem))
    if args.csv:
        write_csv(args.csv, report)
    if args.svg:
        write_svg(args.svg, est, gt, report)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="structvo", description="Manhattan-world monocular visual odometry")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--preset", default="corridor", help=f"one of {', '.join(sorted(PRESETS))}")
    s.add_argument("--scene", help="scene JSON replacing the preset's scene")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int)
    s.add_argument("--normal-scale", type=float, default=0.25, help="normal-map resolution relative to the image")
    s.add_argument("--with-depth", action="store_true", help="also write 16-bit depth PNGs")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="run the pipeline on a dataset")
    r.add_argument("dataset")
    r.add_argument("-o", "--output", required=True, help="estimated trajectory (TUM)")
    r.add_argument("--config")
    r.add_argument("--seed", type=int)
    r.add_argument("--normals", help="file[:<dir>], sim or depth[:<dir>]")
    r.add_argument("--ablate", choices=["no-lines"])
    r.add_argument("--log", help="run log path (default <output>.log.jsonl)")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="ATE/RPE of an estimate against ground truth")
    e.add_argument("estimate")
    e.add_argument("groundtruth")
    e.add_argument("--max-dt", type=float, default=0.02)
    e.add_argument("--fix-scale", action="store_true", help="rigid instead of similarity alignment")
    e.add_argument("--csv")
    e.add_argument("--svg")
    e.add_argument("--name")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        return args.func(args)
    except (BadPreset, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (StructVOError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
