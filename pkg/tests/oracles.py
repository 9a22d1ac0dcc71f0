"""Independent oracles shared by the test suite.

These stay deliberately dumb: central finite differences for gradients, a
direct O(k^2) cross-correlation for conv, a literal re-simulation for the LR
scheduler, and a recount for confusion matrices.  None of them call into the
code paths they check.
"""

import numpy as np


def finite_diff_grad(f, x, step=1e-5):
    """Central finite differences of scalar-valued f with respect to array x.

    f takes no arguments and must re-read x, which is perturbed in place.
    """
    g = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = g.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + step
        fp = f()
        flat_x[i] = orig - step
        fm = f()
        flat_x[i] = orig
        flat_g[i] = (fp - fm) / (2.0 * step)
    return g


def max_rel_err(analytic, numeric):
    """Largest absolute deviation, relative to the numeric gradient's scale."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(numeric).max(), 1e-12)
    return np.abs(analytic - numeric).max() / denom


def conv2d_direct(x, w, b=None, stride=1, padding=0):
    """Loop-nest cross-correlation, the slow reference for conv2d."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow), dtype=x.dtype)
    for bi in range(n):
        for oi in range(o):
            for y in range(oh):
                for xo in range(ow):
                    patch = xp[bi, :, y * stride : y * stride + kh, xo * stride : xo * stride + kw]
                    out[bi, oi, y, xo] = (patch * w[oi]).sum()
            if b is not None:
                out[bi, oi] += b[oi]
    return out


def plateau_oracle(metrics, factor, patience, mode, init_lr, min_lr):
    """Literal re-simulation of the plateau rule; returns the lr after each tick."""
    best = float("inf") if mode == "min" else float("-inf")
    bad = 0
    lr = init_lr
    trace = []
    for m in metrics:
        improved = m < best if mode == "min" else m > best
        if improved:
            best = m
            bad = 0
        else:
            bad += 1
            if bad > patience:
                lr = max(lr * factor, min_lr)
                bad = 0
        trace.append(lr)
    return trace


def confusion_recount(labels, preds, k):
    """Brute-force accuracy and counts from raw (label, pred) pairs."""
    counts = np.zeros((k, k), dtype=np.int64)
    correct = 0
    for lab, pr in zip(labels, preds):
        counts[lab][pr] += 1
        if lab == pr:
            correct += 1
    return counts, correct / max(len(labels), 1)
