"""Kernel backend selection.

Prefers the compiled extension (``ftk._kernels``) and falls back to the
pure-numpy implementation when it is not built.  ``FTK_KERNELS=numpy`` or
``FTK_KERNELS=cython`` forces a backend; forcing cython without a built
extension is an import error rather than a silent downgrade.
"""

import os

from ftk import _kernels_np

_forced = os.environ.get("FTK_KERNELS", "").strip().lower()

if _forced == "numpy":
    _impl = _kernels_np
    BACKEND = "numpy"
else:
    try:
        from ftk import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        if _forced == "cython":
            raise ImportError(
                "FTK_KERNELS=cython requested but the compiled extension is "
                "not built; run `pip install -e .` or `python setup.py "
                "build_ext --inplace`"
            ) from None
        _impl = _kernels_np
        BACKEND = "numpy"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_argmax = _impl.maxpool_argmax
maxpool_scatter = _impl.maxpool_scatter
