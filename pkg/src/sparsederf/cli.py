"""Command-line entry point.

    sparsederf [--config FILE] [--seed N] [--out DIR] [--threads N] <command> ...

Commands: synth, train, render, eval, plot-mgs, import-llff, export-features.
A TOML config file supplies defaults through its `[train]` and `[synth]`
tables; explicit flags win; SPARSEDERF_SEED / SPARSEDERF_THREADS are the
last fallback for the global flags. Every command writes `run.json` into its
output directory.

Exit codes: 0 ok, 1 usage, 2 data, 3 numeric.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import subprocess
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import fields
from functools import wraps
from typing import Any, Callable, Dict, List, Optional, Sequence

import configargparse
import numpy as np

from . import settings
from .checkpoint import latest_checkpoint
from .errors import DomainError, GeometryError, InvariantError, ManifestError, NumericError
from .features import FeatureExtractor, export_feature_maps
from .geometry import poses_from_matrices
from .regularize import mgs_curve
from .render import render_image
from .scene.domain_models import Scene, SyntheticSceneSpec
from .scene.scene_repository import SceneRepository, apply_view_preset, import_llff, write_image
from .scene.synthetic_setup import generate_synthetic_scene
from .trainer import TrainConfig, evaluate, kernel_motion_report, load_model, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

MGS_STEPS = 1001
CONFIG_TABLES = ("train", "synth")

# TrainConfig fields whose default is None
_OPTIONAL_TYPES = {"mgs_rho": float, "mgs_eta": float, "feature_dir": str}


class CommandParser(configargparse.ArgumentParser):
    """Argument parser whose usage errors exit with EXIT_USAGE."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def command_route(handler: Callable[[configargparse.Namespace], None]) -> Callable[[configargparse.Namespace], int]:
    """Decorator mapping engine exceptions to exit codes for command handlers."""
    @wraps(handler)
    def wrapper(args) -> int:
        try:
            handler(args)
            return EXIT_OK
        except (ValueError, KeyError) as e:
            logger.error(f"{args.command}: {e}")
            return EXIT_USAGE
        except (ManifestError, GeometryError, OSError) as e:
            logger.error(f"{args.command}: data error: {e}")
            return EXIT_DATA
        except (NumericError, DomainError, InvariantError) as e:
            logger.error(f"{args.command}: numeric error: {e}")
            return EXIT_NUMERIC
    return wrapper


# -------------------- provenance --------------------

def git_describe() -> str:
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=os.path.dirname(os.path.abspath(__file__)), capture_output=True, text=True, timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return result.stdout.strip() if result.returncode == 0 and result.stdout.strip() else "unknown"


def config_hash(config: Dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode("utf-8")).hexdigest()


def write_run_record(out_dir: str, command: str, seed: int, config: Dict[str, Any], argv: Sequence[str]) -> str:
    os.makedirs(out_dir, exist_ok=True)
    record = {
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "config_hash": config_hash(config),
        "git": git_describe(),
        "config": config,
    }
    path = os.path.join(out_dir, "run.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=str)
    return path


def _out_dir(args) -> str:
    return args.out or os.path.join("runs", args.command)


def _command_config(args) -> Dict[str, Any]:
    skip = {"handler", "config", "argv"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# -------------------- commands --------------------

def _synthetic_spec(args) -> SyntheticSceneSpec:
    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as fh:
            spec = SyntheticSceneSpec.from_item(json.load(fh))
    else:
        spec = SyntheticSceneSpec()
    for flag, attr in (("views", "views"), ("size", "image_size"), ("n", "n"), ("samples", "samples")):
        value = getattr(args, flag)
        if value is not None:
            setattr(spec, attr, value)
    spec.seed = args.seed
    return spec


@command_route
def cmd_synth(args) -> None:
    out_dir = _out_dir(args)
    spec = _synthetic_spec(args)
    generate_synthetic_scene(spec, out_dir, name=args.name)
    write_run_record(out_dir, args.command, args.seed, spec.to_item(), args.argv)


def train_config(args) -> TrainConfig:
    """Preset, then [train] table defaults and flags, then the global seed and threads."""
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig) if getattr(args, f.name, None) is not None}
    overrides["seed"] = args.seed
    overrides["threads"] = args.threads
    if args.views is not None:
        return TrainConfig.for_views(args.views, **overrides)
    if args.preset == "synthetic":
        return TrainConfig.synthetic(**overrides)
    return TrainConfig(**overrides)


def _load_training_scene(args) -> Scene:
    repo = SceneRepository(args.scene)
    scene = repo.load()
    if args.views is not None:
        manifest = apply_view_preset(scene.manifest, args.scene_name or scene.manifest.name, args.views)
        scene = Scene(manifest, scene.root, scene.images, scene.sharp)
    return scene


@command_route
def cmd_train(args) -> None:
    out_dir = _out_dir(args)
    cfg = train_config(args)
    scene = _load_training_scene(args)
    predeblurred = SceneRepository(scene.root).load_predeblurred(scene.manifest) if cfg.pd else {}
    resume = args.resume
    if resume == "auto":
        resume = latest_checkpoint(os.path.join(out_dir, "checkpoints"))
    write_run_record(out_dir, args.command, cfg.seed, cfg.to_item(), args.argv)
    result = train(scene, cfg, out_dir, resume=resume, predeblurred=predeblurred)
    logger.info(f"Training finished at step {result.state.step}; checkpoint {result.checkpoint}")


def _depth_image(depth: np.ndarray, near: float, far: float, ndc: bool) -> np.ndarray:
    """Depth normalized to [0, 1] by the near/far bounds (NDC depth already is)."""
    d = depth if ndc else (depth - near) / (far - near)
    return np.repeat(np.clip(d, 0.0, 1.0)[..., None], 3, axis=-1)


@command_route
def cmd_eval(args) -> None:
    out_dir = _out_dir(args)
    model, params, cfg, ckpt = load_model(args.checkpoint)
    repo = SceneRepository(args.scene)
    scene = repo.load()
    factor = args.render_factor or cfg.render_factor
    result = evaluate(model, params, scene, args.split, factor, cfg.chunk_rays, args.threads)
    render_dir = os.path.join(out_dir, "renders")
    for view_id, (color, depth) in result.renders.items():
        view = scene.manifest.view(view_id)
        depth_rgb = _depth_image(depth, view.near, view.far, scene.manifest.ndc)
        write_image(os.path.join(render_dir, f"{view_id}_color.png"), color)
        write_image(os.path.join(render_dir, f"{view_id}_depth.png"), depth_rgb)
        write_image(os.path.join(render_dir, f"{view_id}_pair.png"), np.concatenate([color, depth_rgb], axis=1))
    metrics = dict(result.metrics, step=ckpt.step)
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2)
    mean = metrics["mean"]
    logger.info(f"{args.split}: PSNR {mean['psnr']:.2f} dB, SSIM {mean['ssim']:.4f} over {len(result.renders)} views")
    if args.report:
        report = kernel_motion_report(model, params, scene, repo.load_blur_truth(), cfg.chunk_rays)
        with open(os.path.join(out_dir, "kernel_report.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
    write_run_record(out_dir, args.command, args.seed, _command_config(args), args.argv)


@command_route
def cmd_render(args) -> None:
    out_dir = _out_dir(args)
    model, params, cfg, _ = load_model(args.checkpoint)
    manifest = SceneRepository(args.scene).load_manifest()
    reference = manifest.test_views[0]
    intr = reference.intrinsics(manifest.ndc).scaled(args.render_factor)
    if args.poses:
        with open(args.poses, "r", encoding="utf-8") as fh:
            poses = poses_from_matrices(json.load(fh))
    else:
        poses = [v.pose for v in manifest.test_views]
    for i, pose in enumerate(poses):
        color, depth = render_image(model.renderer, pose, intr, cfg.chunk_rays, args.threads, params)
        write_image(os.path.join(out_dir, "frames", f"{i:03d}.png"), color)
        write_image(os.path.join(out_dir, "frames", f"{i:03d}_depth.png"),
                    _depth_image(depth, intr.near, intr.far, manifest.ndc))
    logger.info(f"Rendered {len(poses)} frames into {out_dir}")
    write_run_record(out_dir, args.command, args.seed, _command_config(args), args.argv)


def mgs_table(rho: float, etas: Sequence[float], naive: bool = True) -> List[Dict[str, Any]]:
    """Rows (curve, rho, eta, delta, value) sampled at delta = 0, 0.001, ..., 1."""
    delta = np.linspace(0.0, 1.0, MGS_STEPS)
    curves = [(f"modulated_eta{eta:g}", "modulated", rho, eta) for eta in etas]
    if naive:
        curves.append(("naive", "naive", float("nan"), float("nan")))
    rows = []
    for name, mode, r, eta in curves:
        values = mgs_curve(delta, r, eta, mode)
        rows.extend({"curve": name, "rho": r, "eta": eta, "delta": float(d), "value": float(v)}
                    for d, v in zip(delta, values))
    return rows


def _plot_rows(rows: List[Dict[str, Any]], path: str) -> Optional[str]:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.info("matplotlib not installed; skipping the raster plot")
        return None
    fig, ax = plt.subplots(figsize=(5, 4))
    for name in dict.fromkeys(r["curve"] for r in rows):
        sel = [r for r in rows if r["curve"] == name]
        ax.plot([r["delta"] for r in sel], [r["value"] for r in sel], label=name)
    ax.set_xlabel("normalized sample distance")
    ax.set_ylabel("gradient scale")
    ax.legend()
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


@command_route
def cmd_plot_mgs(args) -> None:
    out_dir = _out_dir(args)
    os.makedirs(out_dir, exist_ok=True)
    rows = mgs_table(args.rho, args.eta, naive=not args.no_naive)
    csv_path = os.path.join(out_dir, "mgs.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["curve", "rho", "eta", "delta", "value"])
        writer.writeheader()
        writer.writerows(rows)
    _plot_rows(rows, os.path.join(out_dir, "mgs.png"))
    logger.info(f"Gradient scaling curves written to {csv_path}")
    write_run_record(out_dir, args.command, args.seed, _command_config(args), args.argv)


@command_route
def cmd_import_llff(args) -> None:
    out_dir = _out_dir(args)
    import_llff(args.source, out_dir, name=args.name, image_dir=args.image_dir)
    write_run_record(out_dir, args.command, args.seed, _command_config(args), args.argv)


@command_route
def cmd_export_features(args) -> None:
    out_dir = _out_dir(args)
    repo = SceneRepository(args.scene)
    manifest = repo.load_manifest()
    images = repo.load_predeblurred(manifest)
    extractor = FeatureExtractor(args.patch, seed=args.seed)
    export_feature_maps(extractor, images, out_dir)
    write_run_record(out_dir, args.command, args.seed, _command_config(args), args.argv)


# -------------------- parser --------------------

def _add_train_flags(parser: configargparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training options (override the [train] table)")
    for f in fields(TrainConfig):
        if f.name in ("seed", "threads"):
            continue
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            group.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            kind = _OPTIONAL_TYPES.get(f.name, type(f.default))
            group.add_argument(flag, dest=f.name, type=kind, default=None)


def build_parser() -> CommandParser:
    parser = CommandParser(prog="sparsederf", description="Sparse-view deblurring radiance fields")
    parser.add_argument("--config", help="TOML file with [train] / [synth] tables of defaults")
    parser.add_argument("--seed", type=int, env_var=settings.SEED_ENV_VAR, default=0, help="random seed")
    parser.add_argument("--out", default=None, help="output directory (default runs/<command>)")
    parser.add_argument("--threads", type=int, env_var=settings.THREADS_ENV_VAR, default=1,
                        help="worker threads for rendering and gradient sub-batches")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic blurry scene")
    p.add_argument("--spec", help="JSON file with a synthetic scene spec")
    p.add_argument("--name", default="synthetic")
    p.add_argument("--views", type=int, default=None, help="training views")
    p.add_argument("--size", type=int, default=None, help="image width and height")
    p.add_argument("--n", type=int, default=None, help="rays per blur kernel")
    p.add_argument("--samples", type=int, default=None, help="quadrature samples per ray")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="train a deblurring radiance field")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--preset", choices=("default", "synthetic"), default="default")
    p.add_argument("--views", type=int, choices=(2, 4, 6), default=None, help="apply the sparse-view protocol")
    p.add_argument("--scene-name", default=None, help="preset table entry (default: manifest name)")
    p.add_argument("--resume", default=None, help="checkpoint path, or 'auto' for the latest in --out")
    _add_train_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint without the blur kernel")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--split", default="test", choices=("train", "test", "heldout"))
    p.add_argument("--render-factor", type=int, default=None)
    p.add_argument("--report", action="store_true", help="also write the kernel motion report")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("render", help="render poses from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="scene whose test-view intrinsics are used")
    p.add_argument("--poses", default=None, help="JSON list of 3x4 camera-to-world matrices")
    p.add_argument("--render-factor", type=int, default=1)
    p.set_defaults(handler=cmd_render)

    p = sub.add_parser("plot-mgs", help="tabulate gradient scaling curves")
    p.add_argument("--rho", type=float, default=10.0)
    p.add_argument("--eta", type=float, nargs="+", default=[0.5, 1.0, 1.5, 1.75, 2.0])
    p.add_argument("--no-naive", action="store_true", help="omit the naive squared curve")
    p.set_defaults(handler=cmd_plot_mgs)

    p = sub.add_parser("import-llff", help="convert an LLFF capture into a scene directory")
    p.add_argument("--source", required=True)
    p.add_argument("--name", default=None)
    p.add_argument("--image-dir", default="images")
    p.set_defaults(handler=cmd_import_llff)

    p = sub.add_parser("export-features", help="precompute distillation target features")
    p.add_argument("--scene", required=True)
    p.add_argument("--patch", type=int, default=64)
    p.set_defaults(handler=cmd_export_features)
    return parser


def _config_path(argv: Sequence[str]) -> Optional[str]:
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--config="):
            return arg.split("=", 1)[1]
    return None


def apply_config_file(parser: CommandParser, path: str) -> None:
    """Install [train] / [synth] tables as sub-command defaults."""
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    unknown_tables = set(data) - set(CONFIG_TABLES)
    if unknown_tables:
        raise ValueError(f"unknown config tables: {sorted(unknown_tables)}")
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for table in CONFIG_TABLES:
        values = data.get(table, {})
        if not values:
            continue
        target = sub.choices[table]
        dests = {a.dest for a in target._actions}
        unknown = set(values) - dests
        if unknown:
            raise ValueError(f"unknown options in [{table}]: {sorted(unknown)}")
        target.set_defaults(**values)


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=settings.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    config = _config_path(argv)
    if config:
        try:
            apply_config_file(parser, config)
        except (OSError, ValueError, tomllib.TOMLDecodeError) as e:
            logger.error(f"cannot use config file {config}: {e}")
            return EXIT_USAGE
    args = parser.parse_args(argv)
    args.argv = argv
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    return args.handler(args)
