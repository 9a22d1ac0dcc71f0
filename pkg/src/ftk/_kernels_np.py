"""Pure-numpy kernels for conv/pool inner loops.

Drop-in fallback for the compiled extension in ``_kernels.pyx``; the two must
stay bitwise-interchangeable.  Accumulation orders are therefore fixed: col2im
adds kernel taps in (kh, kw) order, max-pool scatter adds windows in
(n, c, oh, ow) order, and max-pool ties resolve to the first maximal element in
row-major window order.

Columns use the whole-batch layout [C*kh*kw, N*OH*OW] so that convolution
forward and backward each reduce to one large GEMM.
"""

import numpy as np


def im2col(xp, kh, kw, stride):
    """Unfold padded input [N,C,Hp,Wp] into columns [C*kh*kw, N*OH*OW]."""
    n, c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    col = np.empty((c, kh, kw, n, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        i_max = i + stride * oh
        for j in range(kw):
            j_max = j + stride * ow
            col[:, i, j] = xp[:, :, i:i_max:stride, j:j_max:stride].transpose(1, 0, 2, 3)
    return col.reshape(c * kh * kw, n * oh * ow)


def col2im(col, n, c, hp, wp, kh, kw, stride):
    """Fold columns back into a padded image, accumulating overlaps."""
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    col6 = col.reshape(c, kh, kw, n, oh, ow)
    img = np.zeros((n, c, hp, wp), dtype=col.dtype)
    for i in range(kh):
        i_max = i + stride * oh
        for j in range(kw):
            j_max = j + stride * ow
            img[:, :, i:i_max:stride, j:j_max:stride] += col6[:, i, j].transpose(1, 0, 2, 3)
    return img


def maxpool_argmax(xp, k, stride):
    """Per-window max of [N,C,Hp,Wp] plus the flat Hp*Wp index of the winner.

    Returns (out [N,C,OH,OW], idx int64 [N,C,OH,OW]); first maximal element in
    row-major window order wins ties.
    """
    n, c, hp, wp = xp.shape
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, oh, ow, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    flat = win.reshape(n, c, oh, ow, k * k)
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    # local index within the k*k window -> flat index into the Hp*Wp plane
    di, dj = np.divmod(local, k)
    rows = np.arange(oh)[:, None] * stride + di
    cols = np.arange(ow)[None, :] * stride + dj
    idx = (rows * wp + cols).astype(np.int64)
    return out, idx


def maxpool_scatter(gout, idx, n, c, hp, wp):
    """Route window gradients back to winning positions, summing overlaps."""
    grad = np.zeros((n, c, hp * wp), dtype=gout.dtype)
    flat_g = gout.reshape(n, c, -1)
    flat_i = idx.reshape(n, c, -1)
    for b in range(n):
        for ch in range(c):
            np.add.at(grad[b, ch], flat_i[b, ch], flat_g[b, ch])
    return grad.reshape(n, c, hp, wp)
