"""Command-line entry point: ``carvemap run|stage|eval|synth|make-scene|init-config``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, PipelineConfig, template
from .pipeline import STAGES, ALIASES, Pipeline, StageError

log = logging.getLogger("carvemap")

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 2, 3


def _add_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("overrides")
    g.add_argument("--dataset", help="dataset directory")
    g.add_argument("--output", help="output directory")
    g.add_argument("--max-range", type=float, help="range filter threshold in metres")
    g.add_argument("--downsample-fraction", type=float, help="fraction of points kept for carving")
    g.add_argument("--use-gt-poses", action="store_true", default=None, help="use poses.txt instead of ICP")
    g.add_argument("--no-car-detection", action="store_true", help="skip car detection and hull replacement")
    g.add_argument("--no-refine", action="store_true", help="skip photometric refinement")
    g.add_argument("--refine-iters", type=int, help="accepted descent steps")
    g.add_argument("--patch", type=int, help="ZNCC patch half-width in pixels")
    g.add_argument("--step", type=float, help="largest vertex move per step in metres")
    g.add_argument("--smooth", type=float, help="umbrella smoothing weight")
    g.add_argument("--pairs", type=int, help="neighbouring views paired with each view")
    g.add_argument("--export-vertex-colors", action="store_true", default=None,
                   help="also write a PLY with per-vertex colours")
    g.add_argument("--threads", type=int, help="cap on worker threads")


def apply_overrides(cfg: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    simple = [("dataset", cfg, "dataset"), ("output", cfg, "output"), ("threads", cfg, "threads"),
              ("max_range", cfg.registration, "max_range"), ("use_gt_poses", cfg.registration, "use_gt_poses"),
              ("downsample_fraction", cfg.carve, "downsample_fraction"),
              ("refine_iters", cfg.refine, "iterations"), ("patch", cfg.refine, "patch"),
              ("step", cfg.refine, "step"), ("smooth", cfg.refine, "smooth"), ("pairs", cfg.refine, "pairs"),
              ("export_vertex_colors", cfg.texture, "export_vertex_colors")]
    for arg, obj, attr in simple:
        value = getattr(args, arg, None)
        if value is not None:
            setattr(obj, attr, value)
    if getattr(args, "no_car_detection", False):
        cfg.cars.enabled = False
    if getattr(args, "no_refine", False):
        cfg.refine.enabled = False
    return cfg


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    return apply_overrides(cfg, args).validate()


def _setup_logging(verbose: bool, logfile: Path | None = None) -> None:
    root = logging.getLogger()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(fmt)
    root.addHandler(console)
    if logfile is not None:
        logfile.parent.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(logfile)
        fh.setFormatter(fmt)
        root.addHandler(fh)


def cmd_run(args) -> int:
    cfg = _load_config(args)
    _setup_logging(args.verbose, Path(cfg.output) / "pipeline.log")
    result = Pipeline(cfg).run()
    for name, path in result.artifacts.items():
        print(f"{name}: {path}")
    if result.report is not None:
        print(f"error: {result.report}")
    return EXIT_OK


def cmd_stage(args) -> int:
    cfg = _load_config(args)
    _setup_logging(args.verbose, Path(cfg.output) / "pipeline.log")
    pipe = Pipeline(cfg)
    rec = pipe.run_stage(args.name, use_cache=not args.force)
    print(f"{rec.name}: {'cache hit' if rec.cached else 'done'} in {rec.seconds:.2f} s")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import mesh_to_cloud_error
    from .meshio import read_mesh, read_points

    _setup_logging(args.verbose)
    try:
        report = mesh_to_cloud_error(read_mesh(args.mesh), read_points(args.cloud))
    except (OSError, ValueError) as exc:
        raise StageError("eval", str(exc)) from exc
    if args.json:
        report.write_json(args.json)
    print(f"avg_m {report.avg:.6f}\nstd_m {report.std:.6f}\nn_points {report.n_points}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .ingest import load_scene, synthesize_dataset

    _setup_logging(args.verbose)
    try:
        scene = load_scene(args.scene)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read scene {args.scene}: {exc}") from exc
    out = synthesize_dataset(scene, args.out)
    print(f"dataset written to {out}")
    return EXIT_OK


def cmd_make_scene(args) -> int:
    from .ingest import save_scene
    from .scenes import SCENES

    path = save_scene(SCENES[args.name](timesteps=args.timesteps, seed=args.seed), args.out)
    print(f"scene written to {path}")
    return EXIT_OK


def cmd_init_config(args) -> int:
    path = Path(args.path)
    if path.exists() and not args.force:
        raise ConfigError(f"{path} exists (use --force to overwrite)")
    path.write_text(template(args.dataset, args.output))
    print(f"config written to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="carvemap", description="Lidar + camera mesh reconstruction pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the full pipeline")
    r.add_argument("config")
    _add_overrides(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("stage", help="run one stage from cached upstream outputs")
    s.add_argument("name", choices=list(STAGES) + list(ALIASES))
    s.add_argument("config")
    s.add_argument("--force", action="store_true", help="recompute even if cached")
    _add_overrides(s)
    s.set_defaults(func=cmd_stage)

    e = sub.add_parser("eval", help="mesh-to-cloud error")
    e.add_argument("mesh")
    e.add_argument("cloud")
    e.add_argument("--json", help="write the report to this file")
    e.set_defaults(func=cmd_eval)

    y = sub.add_parser("synth", help="simulate a dataset from a scene description")
    y.add_argument("scene", help="scene.json")
    y.add_argument("out")
    y.set_defaults(func=cmd_synth)

    m = sub.add_parser("make-scene", help="write a built-in synthetic scene description")
    m.add_argument("name", choices=["room", "crossing", "street"])
    m.add_argument("out")
    m.add_argument("--timesteps", type=int, default=5)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_make_scene)

    c = sub.add_parser("init-config", help="write a default configuration file")
    c.add_argument("path")
    c.add_argument("--dataset", default="data")
    c.add_argument("--output", default="out")
    c.add_argument("--force", action="store_true")
    c.set_defaults(func=cmd_init_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failed: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
