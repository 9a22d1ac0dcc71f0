"""Reverse-mode autodiff over dense numpy arrays.

A :class:`Tensor` wraps a C-contiguous float32/float64 array together with its
gradient, a ``requires_grad`` flag, and a reference to the op that produced it.
Ops build a DAG; ``Tensor.backward()`` walks it in reverse topological order
and accumulates gradients by summation over all paths.

Conventions:

* dtype follows the inputs (binary ops reject mixed f32/f64),
* repeated ``backward()`` calls accumulate; call :func:`zero_grads` between
  optimizer steps, silent resets are never performed,
* broadcasting is restricted to python scalars and rank-1 operands matching
  the other operand's trailing dimension (bias style),
* conv2d is cross-correlation (no kernel flip),
* max-pool ties route the gradient to the first maximal element in row-major
  window order.
"""

from __future__ import annotations

import numpy as np

from ftk import kernels

__all__ = [
    "Tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "matmul",
    "conv2d",
    "maxpool2d",
    "tsum",
    "reshape",
    "log_softmax",
    "nll_loss",
    "batch_norm2d",
    "dropout",
    "global_avg_pool",
    "zero_grads",
]

_FLOATS = (np.float32, np.float64)


def _as_array(data):
    arr = np.asarray(data)
    if arr.dtype not in _FLOATS:
        arr = arr.astype(np.float32)
    return np.ascontiguousarray(arr)


class Tensor:
    """A traced value: array data plus gradient and provenance."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_flow", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._flow = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self.op or 'leaf'})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def _add_flow(self, g: np.ndarray) -> None:
        """Accumulate an in-flight gradient contribution for the current pass."""
        if self._flow is None:
            self._flow = np.zeros_like(self.data)
        self._flow += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad ancestor of a scalar root.

        Each call propagates a fresh seed of 1 and adds the resulting
        gradients into ``grad``; two backward calls without a reset therefore
        double the leaves' gradients.  Use :func:`zero_grads` between
        optimizer steps; grads are never reset silently.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() root must be scalar, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self._add_flow(np.ones_like(self.data))
        for node in reversed(topo):
            g = node._flow
            if g is None:
                continue
            node._flow = None
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            if node._backward is not None:
                node._backward(g)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__


def zero_grads(tensors) -> None:
    """Explicit gradient reset; required between optimizer steps."""
    for t in tensors:
        t.zero_grad()


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ValueError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")


def _binary_mode(a: Tensor, b: Tensor, op: str) -> str:
    """'same' for equal shapes, 'trail' for rank-1 b over a's last dim."""
    if a.shape == b.shape:
        return "same"
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "trail"
    raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _sum_to_trailing(g: np.ndarray, ndim_out: int) -> np.ndarray:
    axes = tuple(range(g.ndim - 1)) if g.ndim > 1 else ()
    return g.sum(axis=axes) if axes else g.copy()


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _shift(a, float(b))
    _check_same_dtype(a, b, "add")
    mode = _binary_mode(a, b, "add")
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad, (a, b), op="add")

    def bw(g):
        if a.requires_grad:
            a._add_flow(g)
        if b.requires_grad:
            b._add_flow(g if mode == "same" else _sum_to_trailing(g, b.data.ndim))

    out._backward = bw
    return out


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _shift(a, -float(b))
    _check_same_dtype(a, b, "sub")
    mode = _binary_mode(a, b, "sub")
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad, (a, b), op="sub")

    def bw(g):
        if a.requires_grad:
            a._add_flow(g)
        if b.requires_grad:
            b._add_flow(-g if mode == "same" else -_sum_to_trailing(g, b.data.ndim))

    out._backward = bw
    return out


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _check_same_dtype(a, b, "mul")
    mode = _binary_mode(a, b, "mul")
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad, (a, b), op="mul")

    def bw(g):
        if a.requires_grad:
            a._add_flow(g * b.data)
        if b.requires_grad:
            gb = g * a.data
            b._add_flow(gb if mode == "same" else _sum_to_trailing(gb, b.data.ndim))

    out._backward = bw
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    out = Tensor(a.data * s, a.requires_grad, (a,), op="scale")

    def bw(g):
        if a.requires_grad:
            a._add_flow(g * s)

    out._backward = bw
    return out


def _shift(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data + a.dtype.type(s), a.requires_grad, (a,), op="shift")

    def bw(g):
        if a.requires_grad:
            a._add_flow(g)

    out._backward = bw
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0), a.requires_grad, (a,), op="relu")

    def bw(g):
        if a.requires_grad:
            a._add_flow(g * (a.data > 0))

    out._backward = bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "matmul")
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul: expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad, (a, b), op="matmul")

    def bw(g):
        if a.requires_grad:
            a._add_flow(g @ b.data.T)
        if b.requires_grad:
            b._add_flow(a.data.T @ g)

    out._backward = bw
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N,C,H,W] with [O,C,kH,kW] filters, zero padding."""
    _check_same_dtype(x, w, "conv2d")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d: expects rank-4 input and weight, got {x.shape} and {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ValueError(f"conv2d: input channels {c} != weight channels {cw}")
    if b is not None and b.shape != (o,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({o},)")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d: kernel ({kh}x{kw}) larger than padded input ({hp}x{wp})")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    col = kernels.im2col(xp, kh, kw, stride)  # [C*kh*kw, N*OH*OW]
    w2 = w.data.reshape(o, -1)
    out_all = w2 @ col  # one GEMM for the whole batch
    if b is not None:
        out_all += b.data[:, None]
    out_data = np.ascontiguousarray(out_all.reshape(o, n, oh, ow).transpose(1, 0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    req = any(p.requires_grad for p in parents)
    out = Tensor(out_data, req, parents, op="conv2d")

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * oh * ow)
        if b is not None and b.requires_grad:
            b._add_flow(g2.sum(axis=1))
        if w.requires_grad:
            w._add_flow((g2 @ col.T).reshape(w.shape))
        if x.requires_grad:
            gcol = np.ascontiguousarray(w2.T @ g2)
            gxp = kernels.col2im(gcol, n, c, hp, wp, kh, kw, stride)
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + wd]
            x._add_flow(gxp)

    out._backward = bw
    return out


def maxpool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Per-window max over [N,C,H,W]; padding (with -inf) must stay < kernel."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2d: expects rank-4 input, got {x.shape}")
    if kernel < 1 or stride < 1:
        raise ValueError(f"maxpool2d: kernel and stride must be >= 1, got {kernel}, {stride}")
    if padding < 0 or padding >= kernel:
        raise ValueError(f"maxpool2d: padding must satisfy 0 <= padding < kernel, got {padding}")
    n, c, h, wd = x.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kernel > hp or kernel > wp:
        raise ValueError(f"maxpool2d: kernel {kernel} exceeds padded extent ({hp}x{wp})")

    if padding:
        xp = np.full((n, c, hp, wp), -np.inf, dtype=x.dtype)
        xp[:, :, padding : padding + h, padding : padding + wd] = x.data
    else:
        xp = x.data
    out_data, idx = kernels.maxpool_argmax(xp, kernel, stride)
    out = Tensor(out_data, x.requires_grad, (x,), op="maxpool2d")

    def bw(g):
        if x.requires_grad:
            gp = kernels.maxpool_scatter(np.ascontiguousarray(g), idx, n, c, hp, wp)
            if padding:
                gp = gp[:, :, padding : padding + h, padding : padding + wd]
            x._add_flow(gp)

    out._backward = bw
    return out


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(a.data.sum(), a.requires_grad, (a,), op="sum")

    def bw(g):
        if a.requires_grad:
            a._add_flow(np.broadcast_to(g, a.shape).astype(a.dtype, copy=True))

    out._backward = bw
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), a.requires_grad, (a,), op="reshape")

    def bw(g):
        if a.requires_grad:
            a._add_flow(g.reshape(a.shape))

    out._backward = bw
    return out


def global_avg_pool(a: Tensor) -> Tensor:
    """Mean over the spatial axes of [N,C,H,W], producing [N,C]."""
    if a.data.ndim != 4:
        raise ValueError(f"global_avg_pool: expects rank-4 input, got {a.shape}")
    n, c, h, w = a.shape
    out = Tensor(a.data.mean(axis=(2, 3)), a.requires_grad, (a,), op="gap")

    def bw(g):
        if a.requires_grad:
            a._add_flow(np.broadcast_to(g[:, :, None, None] / a.dtype.type(h * w), a.shape).astype(a.dtype, copy=True))

    out._backward = bw
    return out


def log_softmax(a: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last axis."""
    m = a.data.max(axis=-1, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    out = Tensor(y, a.requires_grad, (a,), op="log_softmax")

    def bw(g):
        if a.requires_grad:
            a._add_flow(g - np.exp(y) * g.sum(axis=-1, keepdims=True))

    out._backward = bw
    return out


def nll_loss(logprobs: Tensor, targets) -> Tensor:
    """Mean negative log likelihood of integer targets under [N,K] logprobs."""
    if logprobs.data.ndim != 2:
        raise ValueError(f"nll_loss: expects [N,K] logprobs, got {logprobs.shape}")
    t = np.asarray(targets, dtype=np.int64)
    n, k = logprobs.shape
    if t.shape != (n,):
        raise ValueError(f"nll_loss: targets shape {t.shape} != ({n},)")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ValueError(f"nll_loss: target out of range [0, {k})")
    rows = np.arange(n)
    out = Tensor(-logprobs.data[rows, t].mean(), logprobs.requires_grad, (logprobs,), op="nll")

    def bw(g):
        if logprobs.requires_grad:
            gi = np.zeros_like(logprobs.data)
            gi[rows, t] = -g / logprobs.dtype.type(n)
            logprobs._add_flow(gi)

    out._backward = bw
    return out


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float,
    eps: float,
    training: bool,
) -> Tensor:
    """Per-channel batch normalization of [N,C,H,W].

    Train mode normalizes by batch statistics (biased variance) and updates the
    running buffers in place: running <- (1-momentum)*running + momentum*batch,
    with the unbiased batch variance feeding running_var.  Eval mode normalizes
    by the running buffers and leaves them untouched.
    """
    if x.data.ndim != 4:
        raise ValueError(f"batch_norm2d: expects rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm2d: gamma/beta must be ({c},), got {gamma.shape}, {beta.shape}")
    m = n * h * w
    if training and m < 2:
        raise ValueError(f"batch_norm2d: train mode needs N*H*W >= 2, got {m}")

    dt = x.dtype
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # biased
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * (var * (m / max(m - 1, 1))).astype(running_var.dtype)
    else:
        mean = running_mean.astype(dt)
        var = running_var.astype(dt)

    invstd = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    parents = (x, gamma, beta)
    out = Tensor(y, any(p.requires_grad for p in parents), parents, op="batch_norm2d")

    def bw(g):
        if beta.requires_grad:
            beta._add_flow(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma._add_flow((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxh = g * gamma.data[None, :, None, None]
            if training:
                s1 = gxh.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (gxh * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (gxh - s1 / m - xhat * s2 / m) * invstd[None, :, None, None]
            else:
                gx = gxh * invstd[None, :, None, None]
            x._add_flow(gx)

    out._backward = bw
    return out


def dropout(x: Tensor, p: float, mode: str, seed: int) -> Tensor:
    """Inverted dropout: train mode zeroes with probability p and rescales
    survivors by 1/(1-p); eval mode is the identity (bitwise)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout: mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        out = Tensor(x.data, x.requires_grad, (x,), op="dropout")

        def bw_id(g):
            if x.requires_grad:
                x._add_flow(g)

        out._backward = bw_id
        return out

    rng = np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    scale_ = x.dtype.type(1.0 / (1.0 - p))
    out = Tensor(x.data * keep * scale_, x.requires_grad, (x,), op="dropout")

    def bw(g):
        if x.requires_grad:
            x._add_flow(g * keep * scale_)

    out._backward = bw
    return out
