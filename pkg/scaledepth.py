#!/usr/bin/env python3
"""
ScaleDepth command line.

    python scaledepth.py gen-data --train 64 --val 16 --seed 7
    python scaledepth.py train --preset overfit
    python scaledepth.py eval --checkpoint runs/overfit/checkpoints/iter_002000.pt
    python scaledepth.py compare --ours eval_out/report.json --reference baseline/report.json
    python scaledepth.py infer --checkpoint ... --image photo.png --out-dir out/
    python scaledepth.py export-embeddings --out embeddings.txt
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from checkpoint import latest_checkpoint, load_checkpoint, model_from_checkpoint
from config import (PRESETS, TrainConfig, configure_logging, load_train_config, preset_config,
                    print_config_status, with_seed_override)
from depth_types import (POLICIES, UINT16_MAX, CameraIntrinsics, DepthKind, DepthMap, ValidityPolicy,
                         clip_to_png_range, load_rgb_png, project_point_cloud, save_depth_png, save_rgb_png,
                         write_ply)
from errors import DepthIOError, ScaleDepthError, UsageError
from metrics import (METRIC_FIELDS, MetricReport, dump_reports, format_report, mean_relative_improvement,
                     report_from_dict)
from network import SIZE_MULTIPLE, image_to_tensor, to_prediction
from sasp import DEFAULT_TEMPLATES, build_prompts, save_embedding_table
from synthscenes import DEPTH_DIVISOR, build_pseudo_embeddings, load_split, make_split, materialize
from training import evaluate_samples, resolve_embeddings, train
from visualize import colorize_depth, similarity_grid

logger = logging.getLogger(__name__)


def _resolve_config(args) -> TrainConfig:
    if getattr(args, "config", None):
        return load_train_config(args.config)
    return with_seed_override(preset_config(args.preset))


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    data = cfg.data
    n_train = data.n_train if args.train is None else args.train
    n_val = data.n_val if args.val is None else args.val
    if n_train < 1 or n_val < 1:
        raise UsageError("--train and --val must be >= 1")
    seed = data.split_seed if args.seed is None else args.seed
    image_size = tuple(args.image_size) if args.image_size else data.image_size
    keep = data.keep_fraction if args.keep_fraction is None else args.keep_fraction
    data_dir = args.data_dir or data.data_dir

    print("🧱 Generating synthetic scenes")
    print("=" * 40)
    manifest = make_split(n_train, n_val, data.categories, data.scale_map, seed, image_size)
    written = materialize(manifest, data_dir, data.categories, keep, seed)
    print(f"Categories: {', '.join(data.categories)}")
    print(f"Train/val: {len(manifest.train)}/{len(manifest.val)}")
    print(f"✅ Wrote {written} sample pairs and manifests to {data_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    overrides = {}
    if args.run_dir:
        overrides["run_dir"] = args.run_dir
    if args.iterations:
        overrides["iterations"] = args.iterations
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    if args.data_dir:
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, data_dir=args.data_dir))

    print("🚀 Training ScaleDepth")
    print("=" * 40)
    print(f"Run dir: {cfg.run_dir}")
    print(f"Iterations: {cfg.iterations}  batch: {cfg.batch_size}  crop: {cfg.crop_size}")
    print(f"Scale condition: {cfg.scale_condition}  embeddings: {cfg.data.embeddings}")

    resume = args.resume
    if resume == "latest":
        resume = latest_checkpoint(cfg.run_dir)
        if resume is None:
            raise UsageError(f"--resume latest: no checkpoints under {cfg.run_dir}")
        print(f"Resuming from {resume}")

    record = train(cfg, resume=resume, progress=not args.no_progress)
    if record.losses:
        last = record.losses[-1]
        print(f"Final loss: total={last['total']:.4f} si={last['si']:.4f} ti={last['ti']:.4f}")
    if record.skipped_steps:
        print(f"⚠️  Skipped {record.skipped_steps} non-finite steps")
    if record.validations and record.validations[-1]["summary"]:
        summary = record.validations[-1]["summary"]
        print(f"Validation: arel={summary['arel']:.4f} delta1={summary['delta1']:.4f}")
    for path in record.checkpoints[-1:]:
        print(f"✅ Checkpoint: {path}")
    return 0


def cmd_eval(args) -> int:
    if args.checkpoint:
        # --config supplies data and eval settings; its model section must match the checkpoint
        expected = load_train_config(args.config) if args.config else None
        ckpt = load_checkpoint(args.checkpoint, expected=expected)
        cfg, model = expected or ckpt.config, model_from_checkpoint(ckpt)
    elif args.oracle:
        cfg, model = _resolve_config(args), None
    else:
        raise UsageError("eval needs --checkpoint unless --oracle is given")

    base = POLICIES[args.policy] if args.policy else cfg.eval.validity_policy()
    min_depth = base.min_depth if args.min_depth is None else args.min_depth
    max_depth = base.max_depth if args.max_depth is None else args.max_depth
    policy = ValidityPolicy(min_depth, max_depth)
    data_dir = args.data_dir or cfg.data.data_dir
    samples = load_split(data_dir, args.split, cfg.data.categories)
    table = None if args.oracle or cfg.data.embeddings == "none" else resolve_embeddings(cfg)

    out_dir = Path(args.out_dir)
    print(f"📊 Evaluating {len(samples)} {args.split} samples from {data_dir}")
    print(f"Policy: [{policy.min_depth}, {policy.max_depth}] m{'  (oracle)' if args.oracle else ''}")
    result = evaluate_samples(model, samples, policy, table, cfg.data.categories, oracle=args.oracle,
                              error_dir=None if args.no_error_maps else out_dir / "errors")

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "per_image.txt", "w", encoding="utf-8") as fh:
        for name, report in result.per_image.items():
            fh.write(f"# {name}\n{format_report(report)}")
        for name, message in result.failures.items():
            fh.write(f"# {name}\nerror {message}\n")
    for name in result.failures:
        print(f"⚠️  {name} skipped: {result.failures[name]}")
    if result.summary is None:
        raise ScaleDepthError("no image had valid pixels under the policy")

    (out_dir / "summary.txt").write_text(format_report(result.summary), encoding="utf-8")
    payload = json.loads(dump_reports(result.per_image, result.summary))
    payload.update({k: v for k, v in result.to_dict().items() if k != "summary"})
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")

    print(format_report(result.summary), end="")
    for family, scale in sorted(result.mean_scale.items()):
        print(f"mean scale (family {family:g}): {scale:.3f}")
    if result.scene_accuracy is not None:
        print(f"scene accuracy: {result.scene_accuracy:.3f}")
    print(f"✅ Reports written to {out_dir}")
    return 0


def _load_family_reports(path: str) -> Dict[str, MetricReport]:
    """Per-family reports from an eval report.json, or its summary when it has no families."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DepthIOError(f"report not found: {path}")
    except json.JSONDecodeError as e:
        raise DepthIOError(f"malformed report {path}: {e}")
    entries = payload.get("per_family") or {"all": payload.get("summary")}
    try:
        return {name: report_from_dict(entry) for name, entry in entries.items()}
    except (TypeError, AttributeError) as e:
        raise DepthIOError(f"report {path} lacks metric fields: {e}")


def cmd_compare(args) -> int:
    ours, reference = _load_family_reports(args.ours), _load_family_reports(args.reference)
    print(f"📈 {args.field}: {args.ours} against {args.reference}")
    for name in sorted(set(ours) & set(reference)):
        print(f"family {name}: {getattr(ours[name], args.field):.6f} vs {getattr(reference[name], args.field):.6f}")
    change = mean_relative_improvement(ours, reference, args.field)
    print(f"Mean relative change: {100.0 * change:+.2f}%")
    return 0


def _pad_to_multiple(image: np.ndarray) -> np.ndarray:
    height, width = image.shape[:2]
    pad_h = -height % SIZE_MULTIPLE
    pad_w = -width % SIZE_MULTIPLE
    if not (pad_h or pad_w):
        return image
    return np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect")


def _intrinsics(args) -> Optional[CameraIntrinsics]:
    values = [args.fx, args.fy, args.cx, args.cy]
    if all(v is None for v in values):
        return None
    if any(v is None for v in values):
        raise UsageError("--fx, --fy, --cx and --cy must be given together")
    return CameraIntrinsics(args.fx, args.fy, args.cx, args.cy)


def cmd_infer(args) -> int:
    intrinsics = _intrinsics(args)
    ckpt = load_checkpoint(args.checkpoint)
    cfg, model = ckpt.config, model_from_checkpoint(ckpt)
    table = resolve_embeddings(cfg) if args.with_scene else None

    image = load_rgb_png(args.image)
    height, width = image.shape[:2]
    padded = _pad_to_multiple(image)
    param = next(model.parameters())
    text = table.as_tensor(dtype=param.dtype) if table is not None else None
    with torch.no_grad():
        output = model(image_to_tensor(padded, param.dtype), text, return_decoder=args.save_similarity)
    prediction = to_prediction(output)
    metric = DepthMap(prediction.metric.values[:height, :width], prediction.metric.valid[:height, :width],
                      DepthKind.METRIC)
    metric, clipped = clip_to_png_range(metric, DEPTH_DIVISOR)
    if clipped:
        logger.warning("Clamped %d depth values to the 16-bit PNG range [%g, %g] m", clipped,
                       1.0 / DEPTH_DIVISOR, UINT16_MAX / DEPTH_DIVISOR)
    relative = DepthMap.dense(prediction.relative.values[:height, :width], DepthKind.RELATIVE)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_depth_png(metric, out_dir / "depth.png", DEPTH_DIVISOR)
    save_rgb_png(colorize_depth(relative), out_dir / "relative.png")

    metadata = {
        "image": str(args.image),
        "input_size": [height, width],
        "padded_size": list(padded.shape[:2]),
        "padding": {"bottom": padded.shape[0] - height, "right": padded.shape[1] - width, "mode": "reflect"},
        "scale": prediction.scale,
        "depth_divisor": DEPTH_DIVISOR,
        "clipped_pixels": clipped,
    }
    if prediction.scene is not None:
        best = int(np.argmax(prediction.scene))
        metadata["scene"] = {"category": table.names[best], "probability": float(prediction.scene[best])}
    if intrinsics is not None:
        write_ply(project_point_cloud(metric, intrinsics), out_dir / "points.ply")
        metadata["point_cloud"] = "points.ply"
    if args.save_similarity:
        probs = torch.sigmoid(output.decoder.similarity[0]).double().cpu().numpy()
        save_rgb_png(similarity_grid(probs), out_dir / "similarity.png")
    (out_dir / "metadata.json").write_text(json.dumps(metadata, indent=2, sort_keys=True), encoding="utf-8")

    print(f"🔍 Inference on {args.image} ({height}x{width})")
    print(f"Predicted scale S: {prediction.scale:.4f}")
    if "scene" in metadata:
        print(f"Scene: {metadata['scene']['category']} ({metadata['scene']['probability']:.2f})")
    print(f"✅ Outputs written to {out_dir}")
    return 0


def cmd_export_embeddings(args) -> int:
    cfg = _resolve_config(args)
    categories = [c.strip() for c in args.categories.split(",")] if args.categories else list(cfg.data.categories)
    dim = args.dim or cfg.model.text_dim
    seed = cfg.data.embedding_seed if args.seed is None else args.seed

    table = build_pseudo_embeddings(categories, dim, seed)
    save_embedding_table(table, args.out)
    print(f"✅ Wrote {table.num_categories} x {table.dim} pseudo embeddings to {args.out}")
    if args.prompts:
        grid = build_prompts(DEFAULT_TEMPLATES, categories)
        Path(args.prompts).write_text("".join(p + "\n" for row in grid for p in row), encoding="utf-8")
        print(f"✅ Wrote {len(categories)} x {len(DEFAULT_TEMPLATES)} prompts to {args.prompts}")
    return 0


def cmd_status(args) -> int:
    print_config_status()
    return 0


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Run configuration file (INI sections)")
    parser.add_argument("--preset", default="toy", choices=sorted(PRESETS), help="Named preset when no --config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="ScaleDepth: metric depth as scene scale times relative depth")
    parser.add_argument("--log-level", default=None, help="Override LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Generate and materialize a synthetic dataset")
    _add_config_args(p)
    p.add_argument("--train", type=int, help="Number of training samples")
    p.add_argument("--val", type=int, help="Number of validation samples")
    p.add_argument("--seed", type=int, help="Split seed")
    p.add_argument("--data-dir", help="Output directory")
    p.add_argument("--image-size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--keep-fraction", type=float, help="Fraction of training depth pixels kept valid")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="Train a model")
    _add_config_args(p)
    p.add_argument("--resume", help="Checkpoint to resume from, or 'latest' for the newest in the run dir")
    p.add_argument("--run-dir", help="Override train.run_dir")
    p.add_argument("--data-dir", help="Override data.data_dir")
    p.add_argument("--iterations", type=int, help="Override train.iterations")
    p.add_argument("--no-progress", action="store_true", help="Disable the progress bar")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a checkpoint on a dataset split")
    _add_config_args(p)
    p.add_argument("--checkpoint", help="Checkpoint file")
    p.add_argument("--data-dir", help="Dataset directory")
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.add_argument("--min-depth", type=float)
    p.add_argument("--max-depth", type=float)
    p.add_argument("--policy", choices=sorted(POLICIES), help="Standard depth cap instead of eval.policy")
    p.add_argument("--no-error-maps", action="store_true", help="Skip the per-image error PNGs")
    p.add_argument("--oracle", action="store_true", help="Score ground truth against itself")
    p.add_argument("--out-dir", default="eval_out", help="Report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="Mean relative change between two eval reports")
    p.add_argument("--ours", required=True, help="report.json of the run being compared")
    p.add_argument("--reference", required=True, help="report.json of the baseline")
    p.add_argument("--field", default="arel", choices=METRIC_FIELDS)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("infer", help="Predict depth for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-dir", default="infer_out")
    for name in ("fx", "fy", "cx", "cy"):
        p.add_argument(f"--{name}", type=float, help="Camera intrinsic for the point cloud")
    p.add_argument("--save-similarity", action="store_true", help="Write per-bin similarity maps")
    p.add_argument("--with-scene", action="store_true", help="Run the text-similarity branch")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("export-embeddings", help="Write a pseudo scene embedding table")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--categories", help="Comma-separated category names")
    p.add_argument("--dim", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--prompts", help="Also write the category x template prompt list here")
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("status", help="Show environment configuration status")
    p.set_defaults(func=cmd_status)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"❌ Usage error: {e}", file=sys.stderr)
        return 2
    except (ScaleDepthError, ValueError, OSError) as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
