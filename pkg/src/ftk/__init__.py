"""ftk: a small CNN fine-tuning toolkit.

Library layout:

* :mod:`ftk.tensor`      reverse-mode autodiff core
* :mod:`ftk.kernels`     conv/pool inner loops (compiled extension or numpy)
* :mod:`ftk.layers`      layers, parameter tree, freezing
* :mod:`ftk.optim`       Adam, global-norm clipping, plateau LR, early stopping
* :mod:`ftk.data`        PPM datasets, stratified splits, seeded augmentation
* :mod:`ftk.models`      architecture builders and head replacement
* :mod:`ftk.metrics`     confusion matrices and training history
* :mod:`ftk.checkpoint`  FTK1 tensor container
* :mod:`ftk.cli`         train / evaluate / predict / split / extract-features
"""

__version__ = "0.1.0"

from ftk.tensor import Tensor

__all__ = ["Tensor", "__version__"]
