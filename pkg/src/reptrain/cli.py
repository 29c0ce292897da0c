"""Command-line interface.

Subcommands: synth, train, eval, highlight, inspect.  Exit codes: 0 on
success, 1 on runtime failure, 2 on usage or validation errors.  A flat
`key = value` config file can preload options; explicit flags win.  All
randomness flows from the seed, so reruns with identical inputs produce
identical outputs; commands refuse to overwrite an existing output
directory unless --force is given.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .checkpoint import CheckpointError, describe_checkpoint
from .data import (
    DEFAULT_PROPORTIONS,
    ManifestError,
    class_counts,
    export_dataset,
    full_view,
    load_manifest,
    synth_generate,
)
from .evaluate import emit_report
from .highlight import (
    HighlightConfig,
    extract_highlight,
    extract_highlight_pair,
    render_overlay,
    write_correlations_csv,
    channel_correlations,
)
from .nn import conv1_feature_maps
from .trainer import EmptyViewError, TrainConfig, _parse_config_value, load_run, repetitive_train


class UsageError(Exception):
    """Bad flags or unusable inputs; maps to exit code 2."""


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_EXTRA_KEYS = {"gap", "signed", "post_activation", "manifest", "image_root", "image_size", "out"}
CONFIG_KEYS = _TRAIN_KEYS | _EXTRA_KEYS


def _read_config_file(path: str) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def _train_config(args, file_values: dict[str, str]) -> TrainConfig:
    kwargs = {}
    for key, raw in file_values.items():
        if key in _TRAIN_KEYS:
            try:
                kwargs[key] = _parse_config_value(key, raw)
            except ValueError as exc:
                raise UsageError(f"config key {key}: {exc}")
    overrides = {
        "class_scores": _parse_scores(args.class_scores) if args.class_scores else None,
        "epochs_per_iteration": args.epochs,
        "lr": args.lr,
        "momentum": args.momentum,
        "batch_size": args.batch_size,
        "loss_threshold": args.loss_threshold,
        "max_iterations": args.max_iterations,
        "target_remaining_fraction": args.target_remaining_fraction,
        "threshold_low": args.threshold_low,
        "threshold_high": args.threshold_high,
        "threshold_step": args.threshold_step,
        "seed": args.seed,
        "literal_condition_mode": (
            None if args.condition_mode is None else args.condition_mode == "literal"
        ),
        "likelihood_softmax": (
            None if args.likelihood is None else args.likelihood == "softmax"
        ),
        "freeze_conv": True if args.freeze_conv else None,
    }
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    cfg = TrainConfig(**kwargs)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    return cfg


def _parse_scores(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise UsageError(f"bad --class-scores {text!r}; expected e.g. '2,3,4,5'")


def _parse_proportions(text: str) -> dict[int, float]:
    out: dict[int, float] = {}
    try:
        for part in text.split(","):
            score, frac = part.split(":")
            out[int(score.strip())] = float(frac.strip())
    except ValueError:
        raise UsageError(f"bad --proportions {text!r}; expected e.g. '3:0.4,4:0.6'")
    return out


def _fresh_dir(path_str: str, force: bool, what: str) -> Path:
    path = Path(path_str)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"{what} {path} already exists and is not empty; use --force")
    return path


def _load_dataset(args, class_scores, image_size: int):
    if getattr(args, "data", None):
        data_dir = Path(args.data)
        manifest = data_dir / "manifest.csv"
        image_root = data_dir
    else:
        manifest = Path(args.manifest)
        image_root = Path(args.image_root) if args.image_root else manifest.parent
    if not manifest.is_file():
        raise UsageError(f"manifest not found: {manifest}")
    try:
        return load_manifest(manifest, image_root, class_scores, image_size)
    except ManifestError as exc:
        raise UsageError(str(exc))


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    proportions = (
        _parse_proportions(args.proportions) if args.proportions else dict(DEFAULT_PROPORTIONS)
    )
    out_dir = _fresh_dir(args.out, args.force, "dataset directory")
    try:
        samples = synth_generate(args.n, proportions, args.image_size, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc))
    manifest = export_dataset(samples, out_dir)
    dist = class_counts(full_view(samples))
    print(f"wrote {len(samples)} samples to {out_dir} (manifest: {manifest})")
    for score in sorted(dist.counts):
        print(f"  score {score}: {dist.counts[score]}")
    print(f"majority classes: {', '.join(str(s) for s in dist.ranked_majority)}")
    return 0


def cmd_train(args) -> int:
    file_values = _read_config_file(args.config) if args.config else {}
    if not getattr(args, "data", None) and not (args.manifest or file_values.get("manifest")):
        raise UsageError("need a data source: --data DIR or --manifest FILE")
    if args.manifest is None and "manifest" in file_values and not getattr(args, "data", None):
        args.manifest = file_values["manifest"]
        args.image_root = args.image_root or file_values.get("image_root")
    cfg = _train_config(args, file_values)
    image_size = args.image_size or int(file_values.get("image_size", 32))
    samples = _load_dataset(args, cfg.class_scores, image_size)
    if not samples:
        raise UsageError("dataset is empty")
    run_dir = _fresh_dir(args.out, args.force, "run directory")
    run = repetitive_train(samples, cfg, run_dir=run_dir)
    print(f"run complete: {run.iterations} iterations, stop reason {run.stop_reason}")
    for i, loss in enumerate(run.losses, start=1):
        print(f"  net_{i}: loss {loss:.4f}, trained on {run.remaining_counts[i - 1]} samples")
    print(f"artifacts in {run_dir}")
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    if not run_dir.is_dir():
        raise UsageError(f"run directory not found: {run_dir}")
    run = load_run(run_dir)
    image_size = run.networks[0].input_shape[1]
    base = _load_dataset(args, run.class_scores, image_size)
    holdout_args = argparse.Namespace(data=None, manifest=args.holdout, image_root=args.holdout_image_root)
    holdout_path = Path(args.holdout)
    if holdout_path.is_dir():
        holdout_args = argparse.Namespace(data=str(holdout_path), manifest=None, image_root=None)
    holdout = _load_dataset(holdout_args, run.class_scores, image_size)
    if not base or not holdout:
        raise UsageError("evaluation needs nonempty base and holdout sets")
    paths = emit_report(run, base, holdout, args.out)
    print(f"report written to {args.out}:")
    for name in ("table1", "table1_holdout", "table2", "table3", "summary"):
        print(f"  {paths[name].name}")
    return 0


def _iter_images(args) -> list[Path]:
    if args.image:
        paths = [Path(args.image)]
    else:
        root = Path(args.images)
        if not root.is_dir():
            raise UsageError(f"image directory not found: {root}")
        paths = sorted(p for p in root.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        if not paths:
            raise UsageError(f"no images found in {root}")
    for p in paths:
        if not p.is_file():
            raise UsageError(f"image not found: {p}")
    return paths


def cmd_highlight(args) -> int:
    file_values = _read_config_file(args.config) if args.config else {}
    run = load_run(Path(args.run))
    gap = args.gap if args.gap is not None else int(file_values.get("gap", 1))
    signed = args.signed or file_values.get("signed", "false") == "true"
    post_activation = args.post_activation or file_values.get("post_activation", "false") == "true"
    try:
        cfg = HighlightConfig(gap=gap, signed=signed, post_activation=post_activation)
    except ValueError as exc:
        raise UsageError(str(exc))

    pair = None
    if args.pair:
        try:
            later, earlier = (int(x) for x in args.pair.split(","))
        except ValueError:
            raise UsageError(f"bad --pair {args.pair!r}; expected e.g. '10,9'")
        if not (1 <= earlier < later <= run.iterations):
            raise UsageError(
                f"--pair {later},{earlier} out of range for a {run.iterations}-iteration run"
            )
        pair = (later, earlier)
    elif run.iterations < cfg.gap + 1:
        raise UsageError(
            f"run has {run.iterations} checkpoints; need at least {cfg.gap + 1} for gap {cfg.gap}"
        )

    out_dir = Path(args.out)
    size = run.networks[0].input_shape[1]
    for img_path in _iter_images(args):
        with Image.open(img_path) as im:
            arr = np.asarray(
                im.convert("RGB").resize((size, size), Image.BILINEAR), dtype=np.float32
            ) / 255.0
        if pair is not None:
            later, earlier = pair
            net_a, net_b = run.networks[later - 1], run.networks[earlier - 1]
            diff, mask = extract_highlight_pair(net_a, net_b, arr, cfg)
            diff.iteration_pair = pair
            suffix = f"_{later}_{earlier}"
        else:
            diff, mask = extract_highlight(run, arr, cfg)
            suffix = f"_{diff.iteration_pair[0]}_{diff.iteration_pair[1]}"
            net_a = run.networks[diff.iteration_pair[0] - 1]
            net_b = run.networks[diff.iteration_pair[1] - 1]
        stem = img_path.stem + suffix
        render_overlay(arr, diff, mask, out_dir / f"{stem}_overlay.png")
        maps_a = conv1_feature_maps(net_a, arr, cfg.post_activation)
        maps_b = conv1_feature_maps(net_b, arr, cfg.post_activation)
        write_correlations_csv(maps_a, maps_b, out_dir / f"{stem}_correlations.csv")
        corr = channel_correlations(maps_a, maps_b)
        print(
            f"{img_path.name}: channel {diff.channel} (corr {corr[diff.channel]:+.4f}), "
            f"highlight {int(mask.mask.sum())} px -> {stem}_overlay.png"
        )
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    print(describe_checkpoint(path))
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reptrain",
        description="Repetitive drop-out training for imbalanced score "
        "classification, with highlight-region extraction.",
    )
    parser.add_argument("--version", action="version", version=f"reptrain {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, default=800, help="number of samples")
    p.add_argument("--proportions", help="per-score fractions, e.g. '3:0.4,4:0.6' (sum 1)")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="overwrite an existing directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run repetitive drop-out training")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="dataset directory (as written by synth)")
    src.add_argument("--manifest", help="manifest CSV (path,score)")
    p.add_argument("--image-root", help="root for manifest-relative image paths")
    p.add_argument("--out", required=True, help="run directory to create")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--image-size", type=int, help="input resolution (default 32)")
    p.add_argument("--class-scores", help="comma list, default '2,3,4,5,6,7,8,9'")
    p.add_argument("--epochs", type=int, help="epochs per iteration")
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--loss-threshold", type=float)
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--target-remaining-fraction", type=float)
    p.add_argument("--threshold-low", type=float)
    p.add_argument("--threshold-high", type=float)
    p.add_argument("--threshold-step", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument(
        "--condition-mode",
        choices=("literal", "own-class"),
        help="which class membership the second/third majority drop tests read",
    )
    p.add_argument("--likelihood", choices=("sigmoid", "softmax"))
    p.add_argument("--freeze-conv", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="emit evaluation tables for a run")
    p.add_argument("--run", required=True, help="run directory")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="training dataset directory")
    src.add_argument("--manifest", help="training manifest CSV")
    p.add_argument("--image-root")
    p.add_argument("--holdout", required=True, help="held-out dataset directory or manifest")
    p.add_argument("--holdout-image-root")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("highlight", help="extract highlight regions from a run")
    p.add_argument("--run", required=True, help="run directory")
    img = p.add_mutually_exclusive_group(required=True)
    img.add_argument("--image", help="one input image")
    img.add_argument("--images", help="directory of input images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--gap", type=int, help="iterations between the compared checkpoints")
    p.add_argument("--pair", help="explicit checkpoint pair 'LATER,EARLIER', e.g. '2,1'")
    p.add_argument("--signed", action="store_true", help="cluster signed differences")
    p.add_argument("--post-activation", action="store_true", help="use rectified conv maps")
    p.set_defaults(func=cmd_highlight)

    p = sub.add_parser("inspect", help="print a checkpoint header")
    p.add_argument("checkpoint", help="checkpoint file")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EmptyViewError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, ManifestError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
