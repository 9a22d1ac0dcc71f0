"""The training loop: split, build, freeze, epoch loop with clipping and
Adam, per-epoch validation, plateau scheduling, early stopping, best-weight
restoration, and artifact writing.
"""

from __future__ import annotations

import json
import math
import time
from pathlib import Path

from ftk import __version__
from ftk._mem import enable_heap_reuse
from ftk.checkpoint import load_into_tree, save_checkpoint
from ftk.config import ConfigError, TrainerConfig, config_digest
from ftk.data import (
    AugmentPipeline,
    Dataset,
    SplitSpec,
    batches,
    load_dataset,
    stratified_split,
    write_manifest,
)
from ftk.layers import nll_loss
from ftk.metrics import ConfusionMatrix, EpochRecord, History, accuracy, summary_line, write_confusion, write_history
from ftk.models import build_model, freeze_backbone
from ftk.optim import Adam, ClipConfig, EarlyStopper, PlateauScheduler, clip_global_norm
from ftk.rng import mix64
from ftk.tensor import Tensor


class DivergenceError(Exception):
    """Training produced a non-finite loss."""


def _monitored(monitor: str, val_loss: float, val_acc: float) -> tuple[float, str]:
    if monitor == "val_loss":
        return val_loss, "min"
    return val_acc, "max"


def train_pipeline(cfg: TrainerConfig) -> AugmentPipeline:
    return AugmentPipeline(ops=list(cfg.augmentation.get("ops", [])),
                           base_seed=cfg.seeds["augment"])


def eval_pipeline(cfg: TrainerConfig) -> AugmentPipeline:
    return train_pipeline(cfg).deterministic_only()


def evaluate_model(model, ds: Dataset, cfg: TrainerConfig):
    """Eval-mode pass over a dataset; returns (loss, accuracy, confusion)."""
    pipe = eval_pipeline(cfg)
    cm = ConfusionMatrix(len(ds.classes))
    loss_sum = 0.0
    n = 0
    for batch in batches(ds, cfg.batch_size, shuffle=False, pipeline=pipe):
        out = model.forward(Tensor(batch.images), "eval")
        loss = nll_loss(out, batch.labels)
        loss_sum += loss.item() * len(batch.labels)
        n += len(batch.labels)
        cm.update(out.data.argmax(axis=1), batch.labels)
    if n == 0:
        raise DivergenceError("validation set is empty")
    return loss_sum / n, accuracy(cm), cm


def run_training(cfg: TrainerConfig, *, no_timing: bool = False, log=print):
    """Run the full experiment described by cfg; returns (history, out_dir).

    Artifacts land in cfg.output_dir: history.json/csv, confusion.csv,
    best.ftk1, train.manifest, val.manifest, resolved-config.json.  Nothing is
    written until the config and dataset have both validated.
    """
    enable_heap_reuse()
    digest = config_digest(cfg)
    ds = load_dataset(cfg.data_root)
    if len(ds.classes) != cfg.num_classes:
        raise ConfigError(
            f"dataset has {len(ds.classes)} classes but config expects {cfg.num_classes}")
    train_ds, val_ds = stratified_split(
        ds, SplitSpec(train_fraction=cfg.split["fraction"], seed=cfg.split["seed"],
                      stratified=cfg.split.get("stratified", True)))
    if len(val_ds) == 0 or len(train_ds) == 0:
        raise ConfigError("split produced an empty train or validation set")

    model = build_model(cfg.model_config(), cfg.seeds["init"])
    if cfg.init_checkpoint:
        load_into_tree(model.tree, cfg.init_checkpoint)
    if cfg.freeze_backbone:
        n_frozen = freeze_backbone(model)
        log(f"froze {n_frozen} backbone params; training head only")

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir / "train.manifest", [p for p, _ in train_ds.items], ds.classes, digest)
    write_manifest(out_dir / "val.manifest", [p for p, _ in val_ds.items], ds.classes, digest)
    (out_dir / "resolved-config.json").write_text(
        json.dumps({"config_digest": digest, **cfg.to_dict()}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")

    opt = Adam(model.tree, lr=cfg.lr)
    clip_cfg = ClipConfig(cfg.clip_max_norm)
    sched = PlateauScheduler(cfg.lr, factor=cfg.scheduler["factor"],
                             patience=cfg.scheduler["patience"],
                             mode="min" if cfg.scheduler["monitor"] == "val_loss" else "max",
                             min_lr=cfg.scheduler["min_lr"])
    stopper = EarlyStopper(patience=cfg.early_stop["patience"],
                           mode="max" if cfg.early_stop["monitor"] == "val_acc" else "min")
    pipe = train_pipeline(cfg)

    history = History(config_digest=digest)
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.monotonic()
        lr_used = opt.lr
        loss_sum = 0.0
        correct = 0
        seen = 0
        for step, batch in enumerate(
                batches(train_ds, cfg.batch_size, cfg.seeds["shuffle"], epoch, pipeline=pipe)):
            opt.zero_grad()
            out = model.forward(Tensor(batch.images), "train",
                                dropout_seed=mix64(cfg.seeds["init"] ^ (epoch << 20) ^ step))
            loss = nll_loss(out, batch.labels)
            lval = loss.item()
            if not math.isfinite(lval):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            clip_global_norm(opt.trainable_grads(), clip_cfg)
            opt.step()
            loss_sum += lval * len(batch.labels)
            correct += int((out.data.argmax(axis=1) == batch.labels).sum())
            seen += len(batch.labels)
        train_loss = loss_sum / seen
        train_acc = correct / seen

        val_loss, val_acc, _ = evaluate_model(model, val_ds, cfg)
        if not (math.isfinite(val_loss) and math.isfinite(val_acc)):
            raise DivergenceError(f"non-finite validation metrics at epoch {epoch}")

        metric, _ = _monitored(cfg.scheduler["monitor"], val_loss, val_acc)
        opt.lr = sched.step(metric)
        stop_metric, _ = _monitored(cfg.early_stop["monitor"], val_loss, val_acc)
        decision = stopper.update(stop_metric, model.tree)

        wall = 0.0 if no_timing else time.monotonic() - t0
        history.append(EpochRecord(epoch=epoch, train_loss=train_loss, train_acc=train_acc,
                                   val_loss=val_loss, val_acc=val_acc, lr=lr_used,
                                   wall_seconds=wall))
        log(f"epoch {epoch}: train_loss={train_loss:.4f} train_acc={train_acc:.4f} "
            f"val_loss={val_loss:.4f} val_acc={val_acc:.4f} lr={lr_used:g}")
        if decision == "stop":
            history.stop_reason = "early_stopped"
            log(f"early stopping after epoch {epoch}; best epoch was {stopper.best_epoch}")
            break

    history.best_epoch = stopper.best_epoch
    stopper.restore_best(model.tree)

    final_loss, final_acc, cm = evaluate_model(model, val_ds, cfg)
    save_checkpoint(model.tree, {
        "arch": cfg.arch,
        "config_digest": digest,
        "classes": ",".join(ds.classes),
        "best_epoch": str(history.best_epoch),
        "val_acc": f"{final_acc:.6f}",
        "tool": f"ftk {__version__}",
    }, out_dir / "best.ftk1")
    write_history(history, out_dir / "history.json", out_dir / "history.csv")
    write_confusion(cm, ds.classes, out_dir / "confusion.csv")
    log(summary_line(history))
    log(f"restored best epoch {history.best_epoch}: val_loss={final_loss:.4f} val_acc={final_acc:.4f}")
    return history, out_dir
