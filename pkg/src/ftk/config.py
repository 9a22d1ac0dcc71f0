"""Experiment configuration: one JSON document describing the whole run.

Defaults are the reference training protocol: batch size 64, at most 25
epochs, Adam at lr 1e-4, global-norm clipping at 0.1, plateau scheduling
(factor 0.1, patience 2, monitoring validation loss), early stopping
(patience 5, monitoring validation accuracy), a stratified 75/25 split, and
the five-op augmentation pipeline.

The config digest is a sha256 over the resolved document with ``data_root``
and ``output_dir`` removed: it identifies the experiment, not where the data
happened to live.  Every output artifact embeds it.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ftk.data import validate_ops
from ftk.models import ModelConfig

IMAGENET_MEAN = [0.485, 0.456, 0.406]
IMAGENET_STD = [0.229, 0.224, 0.225]


class ConfigError(Exception):
    pass


def default_augmentation_ops(input_size: int) -> list:
    return [
        {"kind": "gaussian_blur", "sigma_min": 0.1, "sigma_max": 1.0, "p": 0.3},
        {"kind": "hflip", "p": 0.5},
        {"kind": "vflip", "p": 0.5},
        {"kind": "rot90", "p": 0.5},
        {"kind": "resize", "height": input_size, "width": input_size},
        {"kind": "normalize", "mean": IMAGENET_MEAN, "std": IMAGENET_STD},
    ]


_TOP_LEVEL_KEYS = {
    "data_root", "output_dir", "arch", "input_size", "num_classes", "width_factor",
    "stage_blocks", "head_hidden", "head_dropout", "batch_size", "max_epochs", "lr",
    "clip_max_norm", "scheduler", "early_stop", "split", "augmentation", "seeds",
    "freeze_backbone", "init_checkpoint",
}


@dataclass
class TrainerConfig:
    data_root: str = ""
    output_dir: str = "runs/out"
    arch: str = "mini_vgg"
    input_size: int = 64
    num_classes: int = 10
    width_factor: int = 2
    stage_blocks: list = field(default_factory=list)
    head_hidden: int = 512
    head_dropout: float = 0.5
    batch_size: int = 64
    max_epochs: int = 25
    lr: float = 1e-4
    clip_max_norm: float = 0.1
    scheduler: dict = field(default_factory=lambda: {
        "factor": 0.1, "patience": 2, "monitor": "val_loss", "min_lr": 1e-7})
    early_stop: dict = field(default_factory=lambda: {"patience": 5, "monitor": "val_acc"})
    split: dict = field(default_factory=lambda: {"fraction": 0.75, "seed": 0, "stratified": True})
    augmentation: dict = field(default_factory=dict)  # {"ops": [...]} filled in __post_init__
    seeds: dict = field(default_factory=lambda: {"init": 0, "shuffle": 0, "augment": 0})
    freeze_backbone: bool = False
    init_checkpoint: str = ""

    def __post_init__(self):
        if not self.augmentation:
            self.augmentation = {"ops": default_augmentation_ops(self.input_size)}
        try:
            validate_ops(self.augmentation.get("ops", []))
            self.model_config()  # arch field validation
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.clip_max_norm <= 0:
            raise ConfigError(f"clip_max_norm must be positive, got {self.clip_max_norm}")
        for key, monitors in (("scheduler", ("val_loss", "val_acc")), ("early_stop", ("val_loss", "val_acc"))):
            monitor = getattr(self, key).get("monitor")
            if monitor not in monitors:
                raise ConfigError(f"{key}.monitor must be one of {monitors}, got {monitor!r}")
        if not 0.0 < self.split.get("fraction", 0.75) < 1.0:
            raise ConfigError(f"split.fraction must be in (0, 1), got {self.split.get('fraction')}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            arch=self.arch,
            input_size=self.input_size,
            num_classes=self.num_classes,
            width_factor=self.width_factor,
            stage_blocks=tuple(self.stage_blocks),
            head_hidden=self.head_hidden,
            head_dropout=self.head_dropout,
        )

    def to_dict(self) -> dict:
        return {
            "data_root": self.data_root,
            "output_dir": self.output_dir,
            "arch": self.arch,
            "input_size": self.input_size,
            "num_classes": self.num_classes,
            "width_factor": self.width_factor,
            "stage_blocks": list(self.stage_blocks),
            "head_hidden": self.head_hidden,
            "head_dropout": self.head_dropout,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "lr": self.lr,
            "clip_max_norm": self.clip_max_norm,
            "scheduler": copy.deepcopy(self.scheduler),
            "early_stop": copy.deepcopy(self.early_stop),
            "split": copy.deepcopy(self.split),
            "augmentation": copy.deepcopy(self.augmentation),
            "seeds": copy.deepcopy(self.seeds),
            "freeze_backbone": self.freeze_backbone,
            "init_checkpoint": self.init_checkpoint,
        }


def _merge_defaults(raw: dict) -> TrainerConfig:
    unknown = set(raw) - _TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    cfg = TrainerConfig(**{k: copy.deepcopy(v) for k, v in raw.items()})
    # nested dicts fill in their own defaults
    base = TrainerConfig()
    for key in ("scheduler", "early_stop", "split", "seeds"):
        merged = dict(getattr(base, key))
        merged.update(getattr(cfg, key))
        unknown = set(merged) - set(getattr(base, key))
        if unknown:
            raise ConfigError(f"unknown {key} key(s): {sorted(unknown)}")
        setattr(cfg, key, merged)
    return cfg


def load_config(path, *, data_root=None, output_dir=None, seed=None, no_augment=False) -> TrainerConfig:
    """Parse a config file and apply CLI overrides.

    ``seed`` overrides all three of seeds.init/shuffle/augment and the split
    seed; ``no_augment`` strips the stochastic augmentation ops, keeping the
    deterministic resize/normalize tail the models require.
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    try:
        cfg = _merge_defaults(raw)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    if data_root is not None:
        cfg.data_root = str(data_root)
    if output_dir is not None:
        cfg.output_dir = str(output_dir)
    if seed is not None:
        cfg.seeds = {"init": seed, "shuffle": seed, "augment": seed}
        cfg.split = {**cfg.split, "seed": seed}
    if no_augment:
        from ftk.data import DETERMINISTIC_OPS

        cfg.augmentation = {
            "ops": [op for op in cfg.augmentation.get("ops", []) if op["kind"] in DETERMINISTIC_OPS]
        }
    return cfg


def config_digest(cfg: TrainerConfig) -> str:
    doc = cfg.to_dict()
    doc.pop("data_root")
    doc.pop("output_dir")
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
