"""Command-line entry point.

Subcommands::

    ftk train            run a full experiment from a JSON config
    ftk evaluate         score a checkpoint over a split manifest
    ftk predict          classify individual images
    ftk split            write train/val manifests for a dataset
    ftk extract-features dump frozen-trunk features to an FTK1 file

Exit codes: 0 success, 2 bad config/dataset/arguments, 3 numerical
divergence, 1 internal error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from ftk.checkpoint import CheckpointError, load_checkpoint, load_into_tree, save_checkpoint
from ftk.config import ConfigError, config_digest, load_config
from ftk.data import (
    DatasetError,
    SplitSpec,
    augment,
    batches,
    dataset_from_manifest,
    decode_ppm,
    load_dataset,
    read_manifest,
    stratified_split,
    write_manifest,
)
from ftk.metrics import accuracy, write_confusion
from ftk.models import build_model, feature_extract, freeze_backbone
from ftk.trainer import DivergenceError, eval_pipeline, evaluate_model, run_training

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_BAD_INPUT = 2
EXIT_DIVERGED = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ftk", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training experiment from a config file")
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--data", help="override config data_root")
    p.add_argument("--out", help="override config output_dir")
    p.add_argument("--seed", type=int, help="override init/shuffle/augment/split seeds")
    p.add_argument("--no-augment", action="store_true",
                   help="drop stochastic augmentation ops (resize/normalize stay)")
    p.add_argument("--no-timing", action="store_true",
                   help="record wall_seconds as 0 so history files are byte-reproducible")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="override config data_root")
    p.add_argument("--out", default=".", help="directory for confusion.csv")
    p.add_argument("--force", action="store_true", help="ignore config-digest mismatches")

    p = sub.add_parser("predict", help="classify images with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("images", nargs="*", help="PPM images to classify")

    p = sub.add_parser("split", help="write train/val manifests for a dataset tree")
    p.add_argument("--data", required=True)
    p.add_argument("--fraction", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory for the manifests")

    p = sub.add_parser("extract-features", help="cache frozen-backbone features as FTK1")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="dataset tree to featurize")
    p.add_argument("--out", required=True, help="output .ftk1 path")
    return parser


def _load_model(cfg, checkpoint_path):
    model = build_model(cfg.model_config(), cfg.seeds["init"])
    meta = load_into_tree(model.tree, checkpoint_path)
    return model, meta


def _digest_gate(meta: dict, manifest_digest: str, cfg, force: bool) -> None:
    digests = {meta.get("config_digest", "-"), manifest_digest, config_digest(cfg)}
    digests.discard("-")
    if len(digests) > 1:
        msg = f"config digests disagree: checkpoint={meta.get('config_digest')}, " \
              f"manifest={manifest_digest}, config={config_digest(cfg)}"
        if not force:
            raise ConfigError(msg + " (use --force to override)")
        print(f"warning: {msg}", file=sys.stderr)


def cmd_train(args) -> int:
    cfg = load_config(args.config, data_root=args.data, output_dir=args.out,
                      seed=args.seed, no_augment=args.no_augment)
    history, out_dir = run_training(cfg, no_timing=args.no_timing)
    print(f"artifacts written to {out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, data_root=args.data)
    model, meta = _load_model(cfg, args.checkpoint)
    _, _, manifest_digest = read_manifest(args.manifest)
    _digest_gate(meta, manifest_digest, cfg, args.force)
    ds = dataset_from_manifest(cfg.data_root, args.manifest)
    loss, acc, cm = evaluate_model(model, ds, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_confusion(cm, ds.classes, out_dir / "confusion.csv")
    print(f"samples={len(ds)} loss={loss:.6f} accuracy={acc:.6f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    if not args.images:
        raise ConfigError("no images given; pass at least one PPM path")
    cfg = load_config(args.config)
    model, meta = _load_model(cfg, args.checkpoint)
    classes = meta.get("classes", "").split(",") if meta.get("classes") else [
        f"class_{k}" for k in range(cfg.num_classes)]
    pipe = eval_pipeline(cfg)
    from ftk.tensor import Tensor

    for path in args.images:
        try:
            img = decode_ppm(Path(path).read_bytes())
        except OSError as e:
            raise DatasetError(f"cannot read image {path}: {e}") from None
        img = augment(img, 0, pipe, 0, 0)  # deterministic ops only
        out = model.forward(Tensor(img[None].astype(np.float32)), "eval")
        k = int(out.data[0].argmax())
        print(f"{path} {classes[k]} {out.data[0, k]:.6f}")
    return EXIT_OK


def cmd_split(args) -> int:
    ds = load_dataset(args.data)
    train, val = stratified_split(ds, SplitSpec(train_fraction=args.fraction, seed=args.seed))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir / "train.manifest", [p for p, _ in train.items], ds.classes)
    write_manifest(out_dir / "val.manifest", [p for p, _ in val.items], ds.classes)
    print(f"wrote {len(train.items)} train / {len(val.items)} val entries to {out_dir}")
    return EXIT_OK


def cmd_extract_features(args) -> int:
    cfg = load_config(args.config, data_root=args.data)
    model, meta = _load_model(cfg, args.checkpoint)
    freeze_backbone(model)
    ds = load_dataset(args.data)
    pipe = eval_pipeline(cfg)
    state = {}
    labels = []
    row = 0
    for batch in batches(ds, cfg.batch_size, shuffle=False, pipeline=pipe):
        feats = feature_extract(model, batch.images)
        for i in range(feats.shape[0]):
            state[f"feat.{row:06d}"] = feats[i]
            row += 1
        labels.extend(int(x) for x in batch.labels)
    state["label"] = np.asarray(labels, dtype=np.float32)
    save_checkpoint(state, {
        "config_digest": config_digest(cfg),
        "classes": ",".join(ds.classes),
        "source_checkpoint": str(args.checkpoint),
        "samples": str(row),
    }, args.out)
    print(f"wrote {row} feature vectors to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "split": cmd_split,
    "extract-features": cmd_extract_features,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DatasetError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (DivergenceError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except Exception as e:  # kept broad so scripted runs always get an exit code
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
