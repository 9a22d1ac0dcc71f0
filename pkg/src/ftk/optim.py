"""Adam plus the three training-control state machines: global-norm gradient
clipping, reduce-on-plateau LR scheduling, and early stopping with best-weight
restoration.

All of these are single-owner objects ticked by the training loop; the
scheduler and stopper tick once per epoch on validation metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ftk.layers import ParamTree


@dataclass
class ClipConfig:
    max_norm: float = 0.1

    def __post_init__(self):
        if not self.max_norm > 0:
            raise ValueError(f"max_norm must be positive, got {self.max_norm}")


def clip_global_norm(grads, cfg: ClipConfig) -> float:
    """Scale the gradient list in place so its collective L2 norm stays within
    ``cfg.max_norm``; returns the applied factor (1.0 if untouched).

    The trigger carries a 1e-7 relative band: scaling rounds in float32, so a
    freshly clipped set can measure a few ulp above max_norm, and without the
    band a second clip would rescale it.  This keeps clipping bitwise
    idempotent while staying far inside the documented max_norm*(1+1e-6)
    envelope.
    """
    total = 0.0
    for g in grads:
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite gradient; training has diverged")
        total += float((g.astype(np.float64, copy=False) ** 2).sum())
    norm = math.sqrt(total)
    if norm <= cfg.max_norm * (1.0 + 1e-7):
        return 1.0
    factor = cfg.max_norm / norm
    for g in grads:
        g *= g.dtype.type(factor)
    return factor


class Adam:
    """Standard Adam with bias correction over a ParamTree's trainable params.

    Moment buffers are keyed by parameter name and created lazily, so freezing
    or unfreezing between steps is safe.  Frozen params are never touched.
    """

    def __init__(self, tree: ParamTree, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.tree = tree
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def trainable_grads(self):
        """Gradient arrays of all trainable params, in tree order."""
        grads = []
        for p in self.tree.trainable_params():
            if p.tensor.grad is None:
                raise ValueError(f"trainable param {p.name!r} has no gradient")
            grads.append(p.tensor.grad)
        return grads

    def step(self) -> None:
        params = self.tree.trainable_params()
        for p in params:
            if p.tensor.grad is None:
                raise ValueError(f"trainable param {p.name!r} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p in params:
            g = p.tensor.grad
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(p.tensor.data)
                self.v[p.name] = np.zeros_like(p.tensor.data)
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.tensor.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.tensor.dtype)

    def zero_grad(self) -> None:
        for p in self.tree.params():
            p.tensor.zero_grad()


def _better(metric: float, best: float, mode: str) -> bool:
    return metric < best if mode == "min" else metric > best


class PlateauScheduler:
    """Multiply the LR by ``factor`` after ``patience`` epochs with no
    improvement of the monitored metric (strict, no min-delta)."""

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 2,
                 mode: str = "min", min_lr: float = 1e-7):
        if not 0.0 < factor < 1.0:
            raise ValueError(f"factor must be in (0, 1), got {factor}")
        if patience < 0:
            raise ValueError(f"patience must be >= 0, got {patience}")
        if mode not in ("min", "max"):
            raise ValueError(f"mode must be 'min' or 'max', got {mode!r}")
        self.factor = factor
        self.patience = patience
        self.mode = mode
        self.min_lr = min_lr
        self.current_lr = max(lr, min_lr)
        self.best = math.inf if mode == "min" else -math.inf
        self.bad_epochs = 0
        self.reductions = 0

    def step(self, metric: float) -> float:
        """Tick with this epoch's metric; returns the (possibly reduced) lr."""
        if not math.isfinite(metric):
            raise ValueError(f"non-finite metric {metric!r}")
        if _better(metric, self.best, self.mode):
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.current_lr = max(self.current_lr * self.factor, self.min_lr)
                self.bad_epochs = 0
                self.reductions += 1
        return self.current_lr


class EarlyStopper:
    """Stop after ``patience`` epochs with no improvement, remembering a deep
    snapshot of the best-epoch weights."""

    def __init__(self, patience: int = 5, mode: str = "max"):
        if patience < 0:
            raise ValueError(f"patience must be >= 0, got {patience}")
        if mode not in ("min", "max"):
            raise ValueError(f"mode must be 'min' or 'max', got {mode!r}")
        self.patience = patience
        self.mode = mode
        self.best_metric = -math.inf if mode == "max" else math.inf
        self.best_weights = None
        self.best_epoch = 0
        self.counter = 0
        self.stopped = False
        self._epochs_seen = 0

    def update(self, metric: float, tree: ParamTree) -> str:
        """Tick with this epoch's metric; returns "continue" or "stop"."""
        if self.stopped:
            raise RuntimeError("early stopper already stopped; no further updates allowed")
        if not math.isfinite(metric):
            raise ValueError(f"non-finite metric {metric!r}")
        self._epochs_seen += 1
        if _better(metric, self.best_metric, self.mode):
            self.best_metric = metric
            self.best_weights = tree.snapshot()
            self.best_epoch = self._epochs_seen
            self.counter = 0
        else:
            self.counter += 1
            if self.counter > self.patience:
                self.stopped = True
                return "stop"
        return "continue"

    def restore_best(self, tree: ParamTree) -> None:
        """Copy the best-epoch snapshot back into the tree, bitwise."""
        if self.best_weights is None:
            raise RuntimeError("no snapshot recorded; update() was never called with an improvement")
        tree.load_state(self.best_weights)


def restore_best(stopper: EarlyStopper, tree: ParamTree) -> None:
    stopper.restore_best(tree)
