#!/usr/bin/env python3
"""
Tubule segmentation toolkit - command-line front end.

Every pipeline stage is a subcommand; every subcommand that writes files
also writes <primary output>.manifest.txt recording the resolved settings,
paths, seed, version and per-stage timings, which `replay` can re-run.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import json
import logging
import shlex
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from errors import UNEXPECTED_ERROR_EXIT, DataError, NumericError, TubuleError, UsageError
from settings import DEFAULT_SETTINGS, Settings

__version__ = "0.1.0"

logger = logging.getLogger("tubule_seg")


# ==============================================================================
# LOGGING CONFIGURATION
# ==============================================================================

def setup_logging(level: str = "INFO", log_file: str = "") -> logging.Logger:
    """Configure the tubule_seg logger (handlers are attached once per process)."""
    logger.setLevel(getattr(logging, str(level).upper(), logging.INFO))

    # Prevent duplicate handlers on repeated dispatch
    if logger.handlers:
        return logger

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(logging.DEBUG)
    console_handler.setFormatter(logging.Formatter(
        "%(asctime)s [%(levelname)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S"
    ))
    logger.addHandler(console_handler)

    if log_file:
        file_handler = logging.FileHandler(Path(log_file).expanduser())
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(
            "%(asctime)s [%(levelname)s] %(name)s:%(funcName)s:%(lineno)d - %(message)s"
        ))
        logger.addHandler(file_handler)

    return logger


# ==============================================================================
# RUN MANIFEST
# ==============================================================================

@dataclass
class RunManifest:
    """Everything needed to reproduce one invocation, as flat key=value text."""

    subcommand: str
    argv: list
    seed: int
    settings: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    version: str = __version__
    source: Optional[Settings] = field(default=None, repr=False)

    @contextmanager
    def stage(self, name: str):
        """Record the wall-clock seconds spent inside the block."""
        started = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = time.perf_counter() - started
            logger.info(f"{name}: {self.timings[name]:.2f}s")

    def to_text(self) -> str:
        lines = [
            f"subcommand={self.subcommand}",
            f"version={self.version}",
            f"seed={self.seed}",
            f"argv={shlex.join(self.argv)}",
        ]
        lines += [f"config.{k}={json.dumps(v)}" for k, v in sorted(self.settings.items())]
        lines += [f"input.{k}={v}" for k, v in sorted(self.inputs.items())]
        lines += [f"output.{k}={v}" for k, v in sorted(self.outputs.items())]
        lines += [f"timing.{k}={v:.6f}" for k, v in self.timings.items()]
        return "\n".join(lines) + "\n"

    def write(self, primary_output) -> Path:
        if self.source is not None:
            self.settings = self.source.flatten()
        path = Path(f"{primary_output}.manifest.txt")
        path.write_text(self.to_text())
        logger.debug(f"Wrote manifest {path}")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise UsageError(f"Cannot read manifest {path}: {e}") from e
        values: dict = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise DataError(f"{path}: malformed manifest line {line!r}")
            values[key] = value
        if "subcommand" not in values or "argv" not in values:
            raise DataError(f"{path}: manifest lacks subcommand or argv")
        manifest = cls(values["subcommand"], shlex.split(values["argv"]), int(values.get("seed", 0)),
                       version=values.get("version", ""))
        for key, value in values.items():
            prefix, _, name = key.partition(".")
            if prefix == "config":
                manifest.settings[name] = json.loads(value)
            elif prefix == "input":
                manifest.inputs[name] = value
            elif prefix == "output":
                manifest.outputs[name] = value
            elif prefix == "timing":
                manifest.timings[name] = float(value)
        return manifest


# ==============================================================================
# ARGUMENT PARSING
# ==============================================================================

class ToolParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _default(key: str):
    node = DEFAULT_SETTINGS
    for part in key.split("."):
        node = node[part]
    return node


def _ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_model_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("model")
    g.add_argument("--task", choices=["airway", "artery-vein"], help=f"Segmentation task (default: {_default('model.task')})")
    g.add_argument("--alpha", type=float, help=f"Distillation loss weight (default: {_default('model.alpha')})")
    g.add_argument("--p", type=float, help=f"Attention map exponent (default: {_default('model.p')})")
    g.add_argument("--r", type=int, help=f"Recalibration compression factor (default: {_default('model.r')})")
    g.add_argument("--channels", type=_ints, help="Channel ladder, 5 comma-separated ints (default: 16,32,64,128,256)")
    g.add_argument("--patch", type=_ints, help="Patch size z,y,x (default: 80,192,304)")
    g.add_argument("--recalibration", choices=["fr", "pe", "cse", "none"],
                   help=f"Recalibration variant (default: {_default('model.recalibration')})")
    g.add_argument("--attention-mapping", choices=["sum", "max", "mean"],
                   help=f"Attention map reduction (default: {_default('model.attention_mapping')})")
    g.add_argument("--pooling", choices=["max", "avg"], help=f"Down-sampling (default: {_default('model.pooling')})")
    g.add_argument("--no-coordinate-map", action="store_true", help="Drop the coordinate channels at the last decoder")
    g.add_argument("--no-aux-head", action="store_true", help="Use 1 - p_background instead of the vessel head")
    g.add_argument("--no-distillation", action="store_true", help="Train without the attention distillation term")


def build_parser() -> ToolParser:
    parser = ToolParser(
        prog="tubule-seg",
        description="Tubule-sensitive airway and artery-vein segmentation toolkit",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Synthetic airway phantom, then train a toy network on eight of them
  tubule-seg phantom --task airway --dims 32,32,32 --ct ct.mha --label label.mha
  tubule-seg train --phantoms 8 --channels 4,8,16,32,64 --patch 32,32,32 --epochs 30 --out toy.ckpt

  # Inference, binarization and airway metrics
  tubule-seg infer --ckpt toy.ckpt --ct ct.mha --out probs.mha
  tubule-seg postprocess --probs probs.mha --th 0.5 --out pred.mha
  tubule-seg eval-airway --pred pred.mha --ref label.mha --trachea trachea.mha --out scores.csv

  # Anatomy prior, graph-cut refinement and fusion for artery-vein
  tubule-seg lung-prior --ct ct.mha --airway airway.mha --context-out ctx.mha --distance-out dist.mha
  tubule-seg graphcut --probs probs.mha --ct ct.mha --kappa 8 --sigma 100 --out refined.mha
  tubule-seg fuse --before pred.mha --after refined.mha --mode union1 --out fused.mha
        """
    )
    parser.add_argument("--config", help="Extra YAML config file merged over config.yaml")
    parser.add_argument("--seed", type=int, help=f"Random seed (default: {_default('train.seed')})")
    parser.add_argument("--threads", type=int, help=f"Worker threads (default: {_default('runtime.threads')})")
    parser.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                        help="Force single-threaded reductions (default: on)")
    parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help=f"Log level (default: {_default('logging.level')})")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="<command>")

    p = sub.add_parser("lung-prior", help="Lung mask, airway wall, context map and distance map")
    p.add_argument("--ct", required=True, help="CT volume (HU)")
    p.add_argument("--airway", required=True, help="Binary airway lumen")
    p.add_argument("--lung", help="Binary lung mask (segmented from the CT when omitted)")
    p.add_argument("--context-out", required=True, help="Output lung context map")
    p.add_argument("--distance-out", required=True, help="Output distance transform map")
    p.add_argument("--lung-out", help="Also write the lung mask here")

    p = sub.add_parser("phantom", help="Seeded synthetic CT with known tubular labels")
    p.add_argument("--task", choices=["airway", "artery-vein"], default="airway", help="Phantom kind (default: airway)")
    p.add_argument("--dims", type=_ints, default=(32, 32, 32), help="Grid size z,y,x (default: 32,32,32)")
    p.add_argument("--branch-levels", type=int, default=2, help="Bifurcation depth, 0 = straight tube (default: 2)")
    p.add_argument("--noise", type=float, default=20.0, help="Gaussian noise std in HU (default: 20)")
    p.add_argument("--ct", required=True, help="Output CT volume")
    p.add_argument("--label", required=True, help="Output label map")
    p.add_argument("--companion", help="Output companion airway (artery-vein only)")

    p = sub.add_parser("train", help="Train a network; writes a checkpoint and its model sidecar")
    _add_model_flags(p)
    p.add_argument("--ct", nargs="*", default=[], help="Training CT volumes")
    p.add_argument("--label", nargs="*", default=[], help="Label maps, one per CT")
    p.add_argument("--context", nargs="*", default=[], help="Context maps (artery-vein)")
    p.add_argument("--distance", nargs="*", default=[], help="Distance maps (artery-vein)")
    p.add_argument("--phantoms", type=int, default=0, help="Train on N seeded phantoms instead of files")
    p.add_argument("--epochs", type=int, help=f"Epochs (default: {_default('train.epochs')})")
    p.add_argument("--lr", type=float, help=f"Adam learning rate (default: {_default('train.lr')})")
    p.add_argument("--batch-size", type=int, help=f"Samples per step (default: {_default('train.batch_size')})")
    p.add_argument("--no-augment", action="store_true", help="Disable on-the-fly augmentation")
    p.add_argument("--history", help="Write the per-epoch loss table here")
    p.add_argument("--out", required=True, help="Output checkpoint")

    p = sub.add_parser("infer", help="Sliding-window inference to a probability stack")
    p.add_argument("--ckpt", required=True, help="Checkpoint (with <ckpt>.model.yaml beside it)")
    p.add_argument("--ct", required=True, help="CT volume")
    p.add_argument("--context", help="Context map (artery-vein)")
    p.add_argument("--distance", help="Distance map (artery-vein)")
    p.add_argument("--stride", type=int, help=f"Axial window stride (default: {_default('inference.stride')})")
    p.add_argument("--lateral-stride", type=int, help="In-plane window stride (default: patch size)")
    p.add_argument("--lung", help="Lung mask; inference runs on its bounding box, background outside")
    p.add_argument("--margin", type=int,
                   help=f"Voxels added around the lung box (default: {_default('inference.lung_margin')})")
    p.add_argument("--out", required=True, help="Output probability stack")

    p = sub.add_parser("postprocess", help="Binarize (airway) or argmax (artery-vein) a probability stack")
    p.add_argument("--probs", required=True, help="Probability stack from infer")
    p.add_argument("--th", type=float, help=f"Airway threshold (default: {_default('inference.th')})")
    p.add_argument("--target-fpr", type=float, help="Pick th so that FPR (percent) does not exceed this; needs --ref")
    p.add_argument("--ref", help="Reference airway for --target-fpr")
    p.add_argument("--trachea", help="Region excluded from the FPR search")
    p.add_argument("--out", required=True, help="Output label map")

    p = sub.add_parser("eval-airway", help="BD/TD/TPR/FPR/DSC of airway predictions")
    p.add_argument("--pred", nargs="+", required=True, help="Predicted airways")
    p.add_argument("--ref", nargs="+", required=True, help="Reference airways, one per prediction")
    p.add_argument("--trachea", nargs="*", default=[], help="Trachea masks excluded from BD/TD/TPR/FPR, one per prediction")
    p.add_argument("--prune", type=float, default=0.0, help="Drop reference spurs shorter than this (mm, default: 0)")
    p.add_argument("--case", nargs="*", default=[], help="Case names in the table (default: prediction file stems)")
    p.add_argument("--out", help="Per-scan CSV report")

    p = sub.add_parser("eval-av", help="ACC/TPR/FPR/DSC/BD/TD and error types over artery-vein scans")
    p.add_argument("--pred", nargs="+", required=True, help="Predicted artery-vein maps")
    p.add_argument("--ref", nargs="+", required=True, help="Reference maps, one per prediction")
    p.add_argument("--out", help="Per-scan CSV report")

    p = sub.add_parser("graphcut", help="Min-cut refinement of artery-vein labels")
    p.add_argument("--probs", required=True, help="3-channel probability stack (background, artery, vein)")
    p.add_argument("--ct", required=True, help="CT volume (HU)")
    p.add_argument("--mask", help="Vessel mask (default: predicted artery or vein)")
    p.add_argument("--kappa", type=float, help=f"Boundary weight (default: {_default('graphcut.kappa')})")
    p.add_argument("--sigma", type=float, help=f"HU similarity scale (default: {_default('graphcut.sigma')})")
    p.add_argument("--out", required=True, help="Output artery-vein map")

    p = sub.add_parser("fuse", help="Union of two artery-vein maps")
    p.add_argument("--before", required=True, help="Network prediction")
    p.add_argument("--after", required=True, help="Refined prediction")
    p.add_argument("--mode", choices=["union1", "union2"], default="union1",
                   help="union1: artery wins overlaps; union2: vein wins (default: union1)")
    p.add_argument("--out", required=True, help="Output artery-vein map")

    p = sub.add_parser("gradcheck", help="Finite-difference check of every differentiable operation")
    p.add_argument("--precision", choices=["f64"], default="f64", help="Floating type of the checks (default: f64)")
    p.add_argument("--tol", type=float, default=1e-4, help="Maximum relative error (default: 1e-4)")
    p.add_argument("--only", nargs="*", help="Restrict to these case names")

    p = sub.add_parser("preview", help="PNG of one axial slice with an optional label overlay")
    p.add_argument("--volume", required=True, help="Volume to display")
    p.add_argument("--label", help="Label map blended on top")
    p.add_argument("--z", type=int, help="Slice index (default: middle)")
    p.add_argument("--level", type=float, default=-600.0, help="Window level in HU (default: -600)")
    p.add_argument("--width", type=float, default=1500.0, help="Window width in HU (default: 1500)")
    p.add_argument("--out", required=True, help="Output PNG")

    p = sub.add_parser("replay", help="Re-run the invocation recorded in a manifest")
    p.add_argument("--manifest", required=True, help="Manifest written by an earlier run")

    return parser


# ==============================================================================
# HELPERS
# ==============================================================================

def _existing(path: Optional[str], what: str) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path).expanduser()
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _read_volume(path: str, what: str):
    from volume_core import Volume, read_metaimage

    grid = read_metaimage(_existing(path, what))
    if not isinstance(grid, Volume):
        return Volume(np.asarray(grid.data, dtype=np.int16), grid.spacing, grid.origin)
    return grid


def _read_labels(path: str, what: str):
    from volume_core import LabelMap, read_metaimage

    grid = read_metaimage(_existing(path, what))
    if not isinstance(grid, LabelMap):
        raise DataError(f"{what} {path} must be an unsigned-byte label map")
    return grid


def _apply_overrides(settings: Settings, args, mapping: dict):
    """Copy every flag that was given into its dotted settings key."""
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            settings.set(key, list(value) if isinstance(value, tuple) else value)


MODEL_FLAGS = {
    "task": "model.task",
    "alpha": "model.alpha",
    "p": "model.p",
    "r": "model.r",
    "channels": "model.channels",
    "patch": "model.patch_size",
    "recalibration": "model.recalibration",
    "attention_mapping": "model.attention_mapping",
    "pooling": "model.pooling",
}


def _model_config(settings: Settings, args):
    from tubule_net import ModelConfig

    _apply_overrides(settings, args, MODEL_FLAGS)
    if args.no_coordinate_map:
        settings.set("model.use_coordinate_map", False)
    if args.no_aux_head:
        settings.set("model.use_aux_vessel_head", False)
    if args.no_distillation:
        settings.set("model.use_distillation", False)
    values = settings.section("model")
    values["seed"] = settings.get("train.seed")
    return ModelConfig.from_dict(values)


# ==============================================================================
# SUBCOMMANDS
# ==============================================================================

def cmd_lung_prior(args, settings: Settings, manifest: RunManifest) -> int:
    from anatomy_prior import build_anatomy_prior, extract_airway_wall, segment_lungs
    from volume_core import normalize_hu, write_metaimage

    ct = _read_volume(args.ct, "CT")
    airway = _read_labels(args.airway, "airway lumen")
    manifest.inputs.update(ct=args.ct, airway=args.airway)
    if args.lung:
        lung = _read_labels(args.lung, "lung mask")
        manifest.inputs["lung"] = args.lung
    else:
        with manifest.stage("lung_segmentation"):
            lung = segment_lungs(normalize_hu(ct))
    with manifest.stage("airway_wall"):
        wall = extract_airway_wall(airway)
    logger.info(f"Airway wall: {int(wall.mask().sum())} voxels")
    with manifest.stage("context_and_distance_maps"):
        context, distance = build_anatomy_prior(ct, airway, lung)

    write_metaimage(context, args.context_out)
    write_metaimage(distance, args.distance_out)
    manifest.outputs.update(context=args.context_out, distance=args.distance_out)
    if args.lung_out:
        write_metaimage(lung, args.lung_out)
        manifest.outputs["lung"] = args.lung_out
    manifest.write(args.context_out)
    return 0


def cmd_phantom(args, settings: Settings, manifest: RunManifest) -> int:
    from phantoms import PhantomConfig, make_phantom
    from volume_core import write_metaimage

    if args.companion and args.task != "artery-vein":
        raise UsageError("--companion only applies to --task artery-vein")
    cfg = PhantomConfig(task=args.task, dims=args.dims, branch_levels=args.branch_levels, noise_std=args.noise)
    with manifest.stage("phantom"):
        made = make_phantom(manifest.seed, cfg)
    write_metaimage(made[0], args.ct)
    write_metaimage(made[1], args.label)
    manifest.outputs.update(ct=args.ct, label=args.label)
    if args.companion:
        write_metaimage(made[2], args.companion)
        manifest.outputs["companion"] = args.companion
    manifest.write(args.ct)
    return 0


def _phantom_samples(count: int, cfg, seed: int) -> list:
    from phantoms import PhantomConfig, make_phantom
    from training import Sample, model_inputs

    samples = []
    for i in range(count):
        made = make_phantom(seed + i, PhantomConfig(task=cfg.task, dims=cfg.patch_size))
        if cfg.task == "airway":
            samples.append(Sample(model_inputs(made[0]), made[1]))
        else:
            from anatomy_prior import build_anatomy_prior, segment_lungs
            from volume_core import normalize_hu

            context, distance = build_anatomy_prior(made[0], made[2], segment_lungs(normalize_hu(made[0])))
            samples.append(Sample(model_inputs(made[0], context, distance), made[1]))
    return samples


def _file_samples(args, cfg) -> list:
    from training import Sample, model_inputs

    if not args.ct or len(args.ct) != len(args.label):
        raise UsageError("train needs --ct and --label with one label per CT (or --phantoms N)")
    if cfg.task == "artery-vein" and not (len(args.context) == len(args.distance) == len(args.ct)):
        raise UsageError("artery-vein training needs one --context and one --distance per CT")
    if cfg.task == "airway" and (args.context or args.distance):
        raise UsageError("--context/--distance only apply to artery-vein training")
    samples = []
    for i, (ct_path, label_path) in enumerate(zip(args.ct, args.label)):
        ct = _read_volume(ct_path, "CT")
        label = _read_labels(label_path, "label")
        if cfg.task == "airway":
            samples.append(Sample(model_inputs(ct), label))
        else:
            context = _read_labels(args.context[i], "context map")
            distance = _read_volume(args.distance[i], "distance map")
            samples.append(Sample(model_inputs(ct, context, distance), label))
    return samples


def cmd_train(args, settings: Settings, manifest: RunManifest) -> int:
    from autodiff import save_checkpoint
    from training import TrainConfig, train
    from tubule_net import build_model, save_model_config

    _apply_overrides(settings, args, {"epochs": "train.epochs", "lr": "train.lr", "batch_size": "train.batch_size"})
    cfg = _model_config(settings, args)
    if args.phantoms and args.ct:
        raise UsageError("--phantoms and --ct are mutually exclusive")
    if args.phantoms < 0:
        raise UsageError("--phantoms must be non-negative")

    with manifest.stage("load"):
        if args.phantoms:
            samples = _phantom_samples(args.phantoms, cfg, manifest.seed)
        else:
            samples = _file_samples(args, cfg)
            manifest.inputs.update({f"ct{i}": p for i, p in enumerate(args.ct)})
            manifest.inputs.update({f"label{i}": p for i, p in enumerate(args.label)})
    tc = TrainConfig.from_settings(settings.section("train"), None if args.no_augment else settings.section("augment"))
    model = build_model(cfg)
    logger.info(f"Training {cfg.task} network: {model.parameter_count()} parameters, {len(samples)} samples")
    with manifest.stage("train"):
        model, history = train(model, samples, tc)

    save_checkpoint(model.state_dict(), args.out)
    save_model_config(cfg, f"{args.out}.model.yaml")
    manifest.outputs.update(checkpoint=args.out, model_config=f"{args.out}.model.yaml")
    if args.history:
        history.write_csv(args.history)
        manifest.outputs["history"] = args.history
    manifest.write(args.out)
    return 0


def cmd_infer(args, settings: Settings, manifest: RunManifest) -> int:
    from autodiff import load_checkpoint
    from training import infer_volume, model_inputs
    from tubule_net import build_model, load_model_config
    from volume_core import write_probability_stack

    ckpt = _existing(args.ckpt, "checkpoint")
    sidecar = _existing(f"{args.ckpt}.model.yaml", "model sidecar")
    _apply_overrides(settings, args, {"stride": "inference.stride", "lateral_stride": "inference.lateral_stride",
                                     "margin": "inference.lung_margin"})
    cfg = load_model_config(sidecar)
    model = build_model(cfg)
    model.load_state_dict(load_checkpoint(ckpt))

    ct = _read_volume(args.ct, "CT")
    manifest.inputs.update(checkpoint=args.ckpt, ct=args.ct)
    if cfg.task == "airway":
        if args.context or args.distance:
            raise UsageError("--context/--distance only apply to artery-vein models")
        channels = model_inputs(ct)
    else:
        if not (args.context and args.distance):
            raise UsageError("artery-vein inference needs --context and --distance")
        channels = model_inputs(ct, _read_labels(args.context, "context map"),
                                _read_volume(args.distance, "distance map"))
        manifest.inputs.update(context=args.context, distance=args.distance)

    lung = None
    if args.lung:
        lung = _read_labels(args.lung, "lung mask")
        manifest.inputs["lung"] = args.lung

    threads = 1 if settings.get("runtime.deterministic") else int(settings.get("runtime.threads"))
    with manifest.stage("inference"):
        probs = infer_volume(model, channels, int(settings.get("inference.stride")),
                             settings.get("inference.lateral_stride"), threads, lung,
                             int(settings.get("inference.lung_margin")))
    write_probability_stack(probs, args.out)
    manifest.outputs["probabilities"] = args.out
    manifest.write(args.out)
    return 0


def cmd_postprocess(args, settings: Settings, manifest: RunManifest) -> int:
    from skeleton_metrics import threshold_at_fpr
    from tubule_net import postprocess
    from volume_core import read_probability_stack, write_metaimage

    probs = read_probability_stack(_existing(args.probs, "probability stack"))
    manifest.inputs["probabilities"] = args.probs
    if len(probs) not in (1, 3):
        raise DataError(f"expected 1 (airway) or 3 (artery-vein) channels, got {len(probs)}")
    task = "airway" if len(probs) == 1 else "artery-vein"

    if args.target_fpr is not None:
        if args.th is not None:
            raise UsageError("--th and --target-fpr are mutually exclusive")
        if not args.ref:
            raise UsageError("--target-fpr needs --ref")
        if task != "airway":
            raise UsageError("--target-fpr applies to airway probabilities only")
        ref = _read_labels(args.ref, "reference")
        trachea = _read_labels(args.trachea, "trachea") if args.trachea else None
        th = threshold_at_fpr(probs[0], ref, args.target_fpr, trachea)
        logger.info(f"Threshold {th:.6g} meets FPR <= {args.target_fpr}%")
        settings.set("inference.th", th)
    else:
        _apply_overrides(settings, args, {"th": "inference.th"})

    pred = postprocess(probs, task, float(settings.get("inference.th")))
    write_metaimage(pred, args.out)
    manifest.outputs["prediction"] = args.out
    manifest.write(args.out)
    return 0


def cmd_eval_airway(args, settings: Settings, manifest: RunManifest) -> int:
    from skeleton_metrics import (
        AIRWAY_COLUMNS,
        aggregate_airway_scores,
        airway_scores,
        build_skeleton_graph,
        format_report,
        prune_spurs,
        skeletonize,
        write_metric_table,
    )

    n = len(args.pred)
    if len(args.ref) != n:
        raise UsageError("eval-airway needs one --ref per --pred")
    if args.trachea and len(args.trachea) != n:
        raise UsageError("--trachea needs one mask per --pred")
    if args.case and len(args.case) != n:
        raise UsageError("--case needs one name per --pred")

    scans, rows = [], []
    for i, (pred_path, ref_path) in enumerate(zip(args.pred, args.ref)):
        pred = _read_labels(pred_path, "prediction")
        ref = _read_labels(ref_path, "reference")
        trachea = _read_labels(args.trachea[i], "trachea") if args.trachea else None
        with manifest.stage(f"centerline{i}"):
            graph = build_skeleton_graph(skeletonize(ref))
            if args.prune > 0:
                graph = prune_spurs(graph, args.prune)
        scores = airway_scores(pred, ref, graph, trachea, int(settings.get("metrics.detection_min_voxels")))
        scans.append(scores)
        rows.append({"case": args.case[i] if args.case else Path(pred_path).stem, **scores.as_dict()})
    manifest.inputs.update({f"pred{i}": p for i, p in enumerate(args.pred)})
    manifest.inputs.update({f"ref{i}": p for i, p in enumerate(args.ref)})

    print(format_report(scans[0].as_dict() if n == 1 else aggregate_airway_scores(scans)))
    if args.out:
        write_metric_table(rows, args.out, AIRWAY_COLUMNS)
        manifest.outputs["report"] = args.out
        manifest.write(args.out)
    return 0


def cmd_eval_av(args, settings: Settings, manifest: RunManifest) -> int:
    from skeleton_metrics import (
        AV_COLUMNS,
        ERROR_TYPES,
        aggregate_av_scores,
        av_reference_graphs,
        av_scores,
        error_breakdown,
        format_report,
        write_metric_table,
    )

    if len(args.pred) != len(args.ref):
        raise UsageError("eval-av needs one --ref per --pred")
    scans, rows = [], []
    counts = np.zeros((3, 3), dtype=np.int64)
    for pred_path, ref_path in zip(args.pred, args.ref):
        pred = _read_labels(pred_path, "prediction")
        ref = _read_labels(ref_path, "reference")
        scan = av_scores(pred, ref, av_reference_graphs(ref), int(settings.get("metrics.detection_min_voxels")))
        counts += error_breakdown(pred, ref).counts
        scans.append(scan)
        rows.append({"case": Path(pred_path).stem, **scan.as_dict()})
    manifest.inputs.update({f"pred{i}": p for i, p in enumerate(args.pred)})
    manifest.inputs.update({f"ref{i}": p for i, p in enumerate(args.ref)})

    summary = aggregate_av_scores(scans, manifest.seed, int(settings.get("metrics.bootstrap_resamples")),
                                  float(settings.get("metrics.confidence")))
    # error types pooled over every scan
    errors = {}
    total_errors = sum(int(counts[i, j]) for cells in ERROR_TYPES.values() for i, j in cells)
    for name, cells in ERROR_TYPES.items():
        n = sum(int(counts[i, j]) for i, j in cells)
        errors[name.lower()] = 100.0 * n / total_errors if total_errors else 0.0
    print(format_report({**summary.as_dict(), **errors}))
    if args.out:
        write_metric_table(rows, args.out, AV_COLUMNS)
        manifest.outputs["report"] = args.out
        manifest.write(args.out)
    return 0


def cmd_graphcut(args, settings: Settings, manifest: RunManifest) -> int:
    from graphcut_refine import refine_artery_vein, vessel_mask_from_prediction
    from tubule_net import postprocess_av
    from volume_core import read_probability_stack, write_metaimage

    probs = read_probability_stack(_existing(args.probs, "probability stack"))
    if len(probs) != 3:
        raise DataError(f"graph cuts need 3 probability channels, got {len(probs)}")
    ct = _read_volume(args.ct, "CT")
    mask = _read_labels(args.mask, "vessel mask") if args.mask else vessel_mask_from_prediction(postprocess_av(probs))
    manifest.inputs.update(probabilities=args.probs, ct=args.ct)
    if args.mask:
        manifest.inputs["mask"] = args.mask
    _apply_overrides(settings, args, {"kappa": "graphcut.kappa", "sigma": "graphcut.sigma"})
    with manifest.stage("graphcut"):
        refined = refine_artery_vein(probs, ct, mask, float(settings.get("graphcut.kappa")),
                                     float(settings.get("graphcut.sigma")))
    write_metaimage(refined, args.out)
    manifest.outputs["prediction"] = args.out
    manifest.write(args.out)
    return 0


def cmd_fuse(args, settings: Settings, manifest: RunManifest) -> int:
    from graphcut_refine import fuse_union
    from volume_core import write_metaimage

    fused = fuse_union(_read_labels(args.before, "before"), _read_labels(args.after, "after"), args.mode)
    write_metaimage(fused, args.out)
    manifest.inputs.update(before=args.before, after=args.after)
    manifest.outputs["prediction"] = args.out
    manifest.write(args.out)
    return 0


def cmd_gradcheck(args, settings: Settings, manifest: RunManifest) -> int:
    from grad_suite import run_gradient_suite

    with manifest.stage("gradient_suite"):
        results = run_gradient_suite(seed=manifest.seed, only=args.only)
    if not results:
        raise UsageError(f"no gradient check named {args.only}")
    failed = []
    for result in results:
        report = result.report
        status = "ok" if result.passed(args.tol) else "FAIL"
        print(f"{result.name:<24} max_rel_err={report.max_rel_err:.3e} "
              f"checked={report.checked} kinks={len(report.kinks)} {status}")
        if status != "ok":
            failed.append(result.name)
    if failed:
        raise NumericError(f"gradient check failed for {', '.join(failed)}")
    return 0


def cmd_preview(args, settings: Settings, manifest: RunManifest) -> int:
    from preview import save_slice_preview

    vol = _read_volume(args.volume, "volume")
    label = _read_labels(args.label, "label") if args.label else None
    save_slice_preview(vol, args.out, args.z, label, level=args.level, width=args.width)
    manifest.inputs["volume"] = args.volume
    manifest.outputs["preview"] = args.out
    manifest.write(args.out)
    return 0


COMMANDS = {
    "lung-prior": cmd_lung_prior,
    "phantom": cmd_phantom,
    "train": cmd_train,
    "infer": cmd_infer,
    "postprocess": cmd_postprocess,
    "eval-airway": cmd_eval_airway,
    "eval-av": cmd_eval_av,
    "graphcut": cmd_graphcut,
    "fuse": cmd_fuse,
    "gradcheck": cmd_gradcheck,
    "preview": cmd_preview,
}


# ==============================================================================
# DISPATCH
# ==============================================================================

def _run(argv: list) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # --help and --version
        return int(e.code or 0)
    if not args.command:
        raise UsageError("no subcommand given; see tubule-seg --help")

    if args.command == "replay":
        recorded = RunManifest.read(_existing(args.manifest, "manifest"))
        if recorded.subcommand == "replay":
            raise UsageError("a replay manifest cannot be replayed")
        logger.info(f"Replaying {recorded.subcommand} recorded by version {recorded.version}")
        return _run(recorded.argv)

    settings = Settings(args.config)
    _apply_overrides(settings, args, {
        "seed": "train.seed",
        "threads": "runtime.threads",
        "deterministic": "runtime.deterministic",
        "log_level": "logging.level",
    })
    setup_logging(settings.get("logging.level"), settings.get("logging.file"))
    if int(settings.get("runtime.threads")) < 1:
        raise UsageError("--threads must be at least 1")

    manifest = RunManifest(args.command, list(argv), int(settings.get("train.seed")), source=settings)
    return COMMANDS[args.command](args, settings, manifest)


def dispatch(argv: Optional[list] = None) -> int:
    """Run one subcommand and map toolkit errors to exit codes; anything else exits with 4."""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        return _run(argv)
    except TubuleError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        print(f"error: unexpected {type(e).__name__}: {e}", file=sys.stderr)
        return UNEXPECTED_ERROR_EXIT


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
