"""Layers over the autodiff core, with a named parameter tree.

Parameters live in a :class:`ParamTree` under hierarchical dotted names
(``features.0.weight``); the tree is the unit of freezing, checkpointing and
optimization.  Batch-norm running statistics are registered as non-trainable
buffer entries: they are saved and restored with the tree but are invisible to
``set_trainable`` and the optimizer.
"""

from __future__ import annotations

import math

import numpy as np

from ftk import tensor as T
from ftk.rng import mix64
from ftk.tensor import Tensor, nll_loss  # noqa: F401  (nll_loss re-exported)

MODES = ("train", "eval")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


class Param:
    """A named tensor with a trainability flag, kept in sync with requires_grad."""

    def __init__(self, name: str, tensor: Tensor, trainable: bool = True, buffer: bool = False):
        self.name = name
        self.tensor = tensor
        self.buffer = buffer
        self._trainable = False
        self.trainable = trainable and not buffer

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        if flag and self.buffer:
            raise ValueError(f"buffer entry {self.name} cannot be made trainable")
        self._trainable = bool(flag)
        self.tensor.requires_grad = self._trainable


class ParamTree:
    """Ordered name -> Param mapping (definition order, unique names)."""

    def __init__(self):
        self._entries: dict[str, Param] = {}

    def register(self, name: str, tensor: Tensor, trainable: bool = True, buffer: bool = False) -> Param:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Param(name, tensor, trainable, buffer)
        self._entries[name] = p
        return p

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Param:
        return self._entries[name]

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self):
        """All entries, buffers included, in definition order."""
        return list(self._entries.values())

    def params(self):
        """Non-buffer entries in definition order."""
        return [p for p in self._entries.values() if not p.buffer]

    def trainable_params(self):
        return [p for p in self._entries.values() if p.trainable]

    def names(self):
        return list(self._entries.keys())

    def set_trainable(self, prefix: str, flag: bool) -> int:
        """Flip trainability of every param whose name starts with prefix."""
        n = 0
        for p in self._entries.values():
            if not p.buffer and p.name.startswith(prefix):
                p.trainable = flag
                n += 1
        return n

    def drop_prefix(self, prefix: str) -> int:
        """Remove every entry under prefix; returns how many were dropped."""
        doomed = [n for n in self._entries if n.startswith(prefix)]
        for n in doomed:
            del self._entries[n]
        return len(doomed)

    def state(self):
        """Live name -> array view of every entry (buffers included)."""
        return {name: p.tensor.data for name, p in self._entries.items()}

    def snapshot(self):
        """Deep copy of the full state; immune to later training."""
        return {name: p.tensor.data.copy() for name, p in self._entries.items()}

    def load_state(self, state, strict: bool = True) -> None:
        """Copy values into existing entries, preserving array identity."""
        for name, p in self._entries.items():
            if name not in state:
                if strict:
                    raise KeyError(f"state is missing entry {name!r}")
                continue
            src = np.asarray(state[name])
            if src.shape != p.tensor.data.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: tree has {p.tensor.data.shape}, state has {src.shape}"
                )
            p.tensor.data[...] = src


def set_trainable(tree: ParamTree, prefix: str, flag: bool) -> int:
    return tree.set_trainable(prefix, flag)


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class ForwardCtx:
    """Per-forward state: mode plus the dropout seed stream."""

    def __init__(self, mode: str = "eval", dropout_seed: int | None = None):
        _check_mode(mode)
        self.mode = mode
        self.dropout_seed = dropout_seed
        self._dropout_calls = 0

    def next_dropout_seed(self) -> int:
        if self.dropout_seed is None:
            raise ValueError("train-mode forward through dropout needs an explicit dropout_seed")
        s = mix64(self.dropout_seed ^ self._dropout_calls)
        self._dropout_calls += 1
        return s


class Conv2d:
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
                 bias: bool = True, *, rng: np.random.Generator):
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(kaiming_uniform((out_ch, in_ch, kernel, kernel), fan_in, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True) if bias else None

    def named_params(self):
        yield "weight", self.weight, False
        if self.bias is not None:
            yield "bias", self.bias, False

    def forward(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear:
    def __init__(self, in_f: int, out_f: int, *, rng: np.random.Generator):
        self.weight = Tensor(kaiming_uniform((in_f, out_f), in_f, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(out_f, dtype=np.float32), requires_grad=True)

    def named_params(self):
        yield "weight", self.weight, False
        yield "bias", self.bias, False

    def forward(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class ReLU:
    def named_params(self):
        return ()

    def forward(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        return T.relu(x)


class MaxPool2d:
    def __init__(self, kernel: int, stride: int, padding: int = 0):
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    def named_params(self):
        return ()

    def forward(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        return T.maxpool2d(x, self.kernel, self.stride, self.padding)


class Dropout:
    def __init__(self, p: float = 0.5):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p

    def named_params(self):
        return ()

    def forward(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        if ctx.mode == "eval" or self.p == 0.0:
            return T.dropout(x, self.p, "eval", 0)
        return T.dropout(x, self.p, "train", ctx.next_dropout_seed())


class BatchNorm2d:
    """Per-channel batch norm; ``frozen`` pins it to running statistics."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.frozen = False
        self.weight = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def named_params(self):
        yield "weight", self.weight, False
        yield "bias", self.bias, False
        yield "running_mean", Tensor(self.running_mean), True
        yield "running_var", Tensor(self.running_var), True

    def forward(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        training = ctx.mode == "train" and not self.frozen
        return T.batch_norm2d(x, self.weight, self.bias, self.running_mean,
                              self.running_var, self.momentum, self.eps, training)


class Flatten:
    def named_params(self):
        return ()

    def forward(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        n = x.shape[0]
        return T.reshape(x, (n, -1))


class LogSoftmax:
    def named_params(self):
        return ()

    def forward(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        return T.log_softmax(x)


class GlobalAvgPool:
    def named_params(self):
        return ()

    def forward(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        return T.global_avg_pool(x)


class BasicBlock:
    """Two 3x3 convs with batch norm and an identity/projection shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, *, rng: np.random.Generator):
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False, rng=rng)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.down_conv = Conv2d(in_ch, out_ch, 1, stride=stride, padding=0, bias=False, rng=rng)
            self.down_bn = BatchNorm2d(out_ch)
        else:
            self.down_conv = None
            self.down_bn = None

    def named_params(self):
        for sub, obj in self._submodules():
            for local, t, buf in obj.named_params():
                yield f"{sub}.{local}", t, buf

    def _submodules(self):
        mods = [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.down_conv is not None:
            mods += [("downsample.0", self.down_conv), ("downsample.1", self.down_bn)]
        return mods

    def forward(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        out = self.bn1.forward(self.conv1.forward(x, ctx), ctx)
        out = T.relu(out)
        out = self.bn2.forward(self.conv2.forward(out, ctx), ctx)
        if self.down_conv is not None:
            shortcut = self.down_bn.forward(self.down_conv.forward(x, ctx), ctx)
        else:
            shortcut = x
        return T.relu(T.add(out, shortcut))


class Bottleneck:
    """1x1 -> 3x3 -> 1x1 residual block; inner width carries the widening."""

    def __init__(self, in_ch: int, width: int, out_ch: int, stride: int = 1, *, rng: np.random.Generator):
        self.conv1 = Conv2d(in_ch, width, 1, stride=1, padding=0, bias=False, rng=rng)
        self.bn1 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, width, 3, stride=stride, padding=1, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(width)
        self.conv3 = Conv2d(width, out_ch, 1, stride=1, padding=0, bias=False, rng=rng)
        self.bn3 = BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.down_conv = Conv2d(in_ch, out_ch, 1, stride=stride, padding=0, bias=False, rng=rng)
            self.down_bn = BatchNorm2d(out_ch)
        else:
            self.down_conv = None
            self.down_bn = None

    def named_params(self):
        mods = [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2),
                ("bn2", self.bn2), ("conv3", self.conv3), ("bn3", self.bn3)]
        if self.down_conv is not None:
            mods += [("downsample.0", self.down_conv), ("downsample.1", self.down_bn)]
        for sub, obj in mods:
            for local, t, buf in obj.named_params():
                yield f"{sub}.{local}", t, buf

    def forward(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        out = T.relu(self.bn1.forward(self.conv1.forward(x, ctx), ctx))
        out = T.relu(self.bn2.forward(self.conv2.forward(out, ctx), ctx))
        out = self.bn3.forward(self.conv3.forward(out, ctx), ctx)
        if self.down_conv is not None:
            shortcut = self.down_bn.forward(self.down_conv.forward(x, ctx), ctx)
        else:
            shortcut = x
        return T.relu(T.add(out, shortcut))


class Stack:
    """Ordered, named layers registered in a ParamTree under a prefix."""

    def __init__(self, named_layers, tree: ParamTree, prefix: str = ""):
        self.layers = list(named_layers)
        self.tree = tree
        self.prefix = prefix
        for name, layer in self.layers:
            for local, t, buf in layer.named_params():
                tree.register(f"{prefix}{name}.{local}", t, trainable=not buf, buffer=buf)

    def forward(self, x: Tensor, mode: str = "eval", dropout_seed: int | None = None,
                ctx: ForwardCtx | None = None) -> Tensor:
        if ctx is None:
            ctx = ForwardCtx(mode, dropout_seed)
        for i, (name, layer) in enumerate(self.layers):
            try:
                x = layer.forward(x, ctx)
            except ValueError as e:
                raise ValueError(f"layer {i} ({self.prefix}{name}): {e}") from None
        return x

    def batchnorms(self):
        out = []
        for _, layer in self.layers:
            if isinstance(layer, BatchNorm2d):
                out.append(layer)
            for attr in ("bn1", "bn2", "bn3", "down_bn"):
                bn = getattr(layer, attr, None)
                if isinstance(bn, BatchNorm2d):
                    out.append(bn)
        return out
