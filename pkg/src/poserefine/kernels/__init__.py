"""Kernel backend selection.

The hot kernels (convolution, bilinear resize, RoI feature extraction)
exist in two equivalent implementations: numba @njit loops (the default)
and vectorized NumPy. Set POSEREFINE_NUMBA=0 to force the pure-numpy
path; it is also used automatically when numba cannot be imported.
benchmarks/bench_kernels.py compares the two paths head to head.
"""

import os
import warnings

from . import numpy_backend

_flag = os.environ.get("POSEREFINE_NUMBA", "1").strip().lower()

if _flag in ("0", "false", "off", "no"):
    _impl = numpy_backend
else:
    try:
        from . import numba_backend as _impl
    except ImportError:  # pragma: no cover - depends on environment
        warnings.warn(
            "numba is not importable; falling back to the numpy kernel backend",
            RuntimeWarning,
        )
        _impl = numpy_backend


def backend_name():
    return "numpy" if _impl is numpy_backend else "numba"


conv2d_forward = _impl.conv2d_forward
conv2d_input_grad = _impl.conv2d_input_grad
conv2d_weight_grad = _impl.conv2d_weight_grad
upsample_forward = _impl.upsample_forward
upsample_input_grad = _impl.upsample_input_grad
roi_align_forward = _impl.roi_align_forward
roi_align_input_grad = _impl.roi_align_input_grad
