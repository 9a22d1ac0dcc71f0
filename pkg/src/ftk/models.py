"""Architecture builders: VGG16, a widened-residual family, and 64x64 mini
variants, plus head replacement, backbone freezing and frozen-trunk feature
extraction.

Backbone parameters live under the ``features.`` prefix, the classifier under
``head.``.  Backbone names follow the conventional layouts (``features.0.weight``
for VGG convs, ``features.layer1.0.conv1.weight`` for residual blocks) so that
externally exported checkpoints map by prefix alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ftk import layers as L
from ftk.tensor import Tensor

ARCHS = ("vgg16", "mini_vgg", "wide_resnet", "mini_wide_resnet")

VGG16_WIDTHS = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]
MINI_VGG_WIDTHS = [32, 32, "M", 64, 64, "M", 128, 128, "M"]


@dataclass
class ModelConfig:
    arch: str = "mini_vgg"
    input_size: int = 64
    num_classes: int = 10
    width_factor: int = 2
    stage_blocks: tuple = ()
    head_hidden: int = 512
    head_dropout: float = 0.5

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}, expected one of {ARCHS}")
        if self.input_size not in (64, 224):
            raise ValueError(f"input_size must be 64 or 224, got {self.input_size}")
        if self.arch.startswith("mini_") and self.input_size != 64:
            raise ValueError(f"{self.arch} requires input_size 64, got {self.input_size}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.width_factor < 1:
            raise ValueError(f"width_factor must be >= 1, got {self.width_factor}")
        if not 0.0 <= self.head_dropout < 1.0:
            raise ValueError(f"head_dropout must be in [0, 1), got {self.head_dropout}")
        if not self.stage_blocks:
            self.stage_blocks = (3, 4, 6, 3) if self.arch == "wide_resnet" else (2, 2, 2)


class BuiltModel:
    """A backbone/head pair sharing one ParamTree."""

    def __init__(self, config: ModelConfig, tree: L.ParamTree, backbone: L.Stack,
                 head: L.Stack, feature_dim: int):
        self.config = config
        self.tree = tree
        self.backbone = backbone
        self.head = head
        self.feature_dim = feature_dim
        self.frozen = False

    def forward(self, x: Tensor, mode: str = "eval", dropout_seed: int | None = None) -> Tensor:
        backbone_mode = "eval" if self.frozen else mode
        h = self.backbone.forward(x, backbone_mode)
        return self.head.forward(h, mode, dropout_seed)


def _vgg_backbone(widths, in_ch: int, rng) -> tuple[list, int]:
    layers = []
    idx = 0
    for v in widths:
        if v == "M":
            layers.append((str(idx), L.MaxPool2d(2, 2)))
            idx += 1
        else:
            layers.append((str(idx), L.Conv2d(in_ch, v, 3, stride=1, padding=1, bias=True, rng=rng)))
            idx += 1
            layers.append((str(idx), L.ReLU()))
            idx += 1
            in_ch = v
    return layers, in_ch


def _head_layers(in_f: int, hidden: int, num_classes: int, p: float, rng) -> list:
    return [
        ("0", L.Flatten()),
        ("1", L.Linear(in_f, hidden, rng=rng)),
        ("2", L.ReLU()),
        ("3", L.Dropout(p)),
        ("4", L.Linear(hidden, num_classes, rng=rng)),
        ("5", L.LogSoftmax()),
    ]


def build_model(cfg: ModelConfig, init_seed: int) -> BuiltModel:
    """Deterministically build an architecture; same seed, same bits."""
    rng = np.random.default_rng(init_seed)
    tree = L.ParamTree()

    if cfg.arch in ("vgg16", "mini_vgg"):
        widths = VGG16_WIDTHS if cfg.arch == "vgg16" else MINI_VGG_WIDTHS
        backbone_layers, out_ch = _vgg_backbone(widths, 3, rng)
        pools = widths.count("M")
        side = cfg.input_size // (2**pools)
        feature_dim = out_ch * side * side
    elif cfg.arch == "wide_resnet":
        backbone_layers = [
            ("conv1", L.Conv2d(3, 64, 7, stride=2, padding=3, bias=False, rng=rng)),
            ("bn1", L.BatchNorm2d(64)),
            ("relu", L.ReLU()),
            ("maxpool", L.MaxPool2d(3, 2, padding=1)),
        ]
        in_ch = 64
        for s, (planes, blocks) in enumerate(zip((64, 128, 256, 512), cfg.stage_blocks)):
            width = planes * cfg.width_factor
            out_ch = planes * 4
            for j in range(blocks):
                stride = 2 if (s > 0 and j == 0) else 1
                backbone_layers.append(
                    (f"layer{s + 1}.{j}", L.Bottleneck(in_ch, width, out_ch, stride, rng=rng))
                )
                in_ch = out_ch
        backbone_layers.append(("avgpool", L.GlobalAvgPool()))
        feature_dim = in_ch
    else:  # mini_wide_resnet
        k = cfg.width_factor
        backbone_layers = [
            ("conv1", L.Conv2d(3, 16, 3, stride=1, padding=1, bias=False, rng=rng)),
            ("bn1", L.BatchNorm2d(16)),
            ("relu", L.ReLU()),
        ]
        in_ch = 16
        for s, (planes, blocks) in enumerate(zip((16 * k, 32 * k, 64 * k), cfg.stage_blocks)):
            for j in range(blocks):
                stride = 2 if (s > 0 and j == 0) else 1
                backbone_layers.append((f"layer{s + 1}.{j}", L.BasicBlock(in_ch, planes, stride, rng=rng)))
                in_ch = planes
        backbone_layers.append(("avgpool", L.GlobalAvgPool()))
        feature_dim = in_ch

    backbone = L.Stack(backbone_layers, tree, "features.")
    head = L.Stack(_head_layers(feature_dim, cfg.head_hidden, cfg.num_classes, cfg.head_dropout, rng),
                   tree, "head.")
    return BuiltModel(cfg, tree, backbone, head, feature_dim)


def replace_head(model: BuiltModel, num_classes: int, seed: int) -> BuiltModel:
    """Discard the head and attach a freshly initialized one; the backbone is
    untouched bitwise."""
    rng = np.random.default_rng(seed)
    model.tree.drop_prefix("head.")
    cfg = model.config
    cfg.num_classes = num_classes
    model.head = L.Stack(
        _head_layers(model.feature_dim, cfg.head_hidden, num_classes, cfg.head_dropout, rng),
        model.tree, "head.")
    return model


def freeze_backbone(model: BuiltModel) -> int:
    """Mark every ``features.`` param non-trainable and pin batch norms to
    their running statistics.  Idempotent; returns the params frozen."""
    n = model.tree.set_trainable("features.", False)
    for bn in model.backbone.batchnorms():
        bn.frozen = True
    model.frozen = True
    return n


def feature_extract(model: BuiltModel, images: np.ndarray) -> np.ndarray:
    """Frozen-trunk features [N, F] for a batch of images [N,3,H,W].

    Requires a frozen backbone so cached features cannot go stale; runs in
    eval mode with no gradient graph and is bitwise repeatable.
    """
    if not model.frozen:
        raise ValueError("feature_extract requires a frozen backbone; call freeze_backbone first")
    out = model.backbone.forward(Tensor(images), "eval")
    return out.data.reshape(out.shape[0], -1).copy()
