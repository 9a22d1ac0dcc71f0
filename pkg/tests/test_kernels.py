"""The compiled and numpy kernel backends must agree bitwise."""

import numpy as np
import pytest

from ftk import _kernels_np
from ftk import kernels


@pytest.fixture(autouse=True)
def _skip_without_extension():
    if kernels.BACKEND != "cython":
        pytest.skip("compiled extension not built; nothing to compare")


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("kh,stride", [(1, 1), (2, 2), (3, 1), (3, 2)])
def test_im2col_col2im_bitwise(dtype, kh, stride, rng):
    xp = rng.standard_normal((2, 3, 9, 9)).astype(dtype)
    a = kernels.im2col(xp, kh, kh, stride)
    b = _kernels_np.im2col(xp, kh, kh, stride)
    assert a.tobytes() == b.tobytes()

    col = rng.standard_normal(a.shape).astype(dtype)
    ga = kernels.col2im(np.ascontiguousarray(col), 2, 3, 9, 9, kh, kh, stride)
    gb = _kernels_np.col2im(col, 2, 3, 9, 9, kh, kh, stride)
    assert ga.tobytes() == gb.tobytes()


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("k,stride", [(2, 2), (3, 2), (3, 1), (2, 1)])
def test_maxpool_bitwise_including_ties(dtype, k, stride, rng):
    # quantized values force plenty of ties
    xp = np.round(rng.standard_normal((2, 2, 8, 8)) * 2).astype(dtype)
    oa, ia = kernels.maxpool_argmax(xp, k, stride)
    ob, ib = _kernels_np.maxpool_argmax(xp, k, stride)
    assert oa.tobytes() == ob.tobytes()
    assert np.array_equal(ia, ib)

    g = rng.standard_normal(oa.shape).astype(dtype)
    ga = kernels.maxpool_scatter(np.ascontiguousarray(g), ia, 2, 2, 8, 8)
    gb = _kernels_np.maxpool_scatter(g, ib, 2, 2, 8, 8)
    assert ga.tobytes() == gb.tobytes()
