"""Pixel kernels with a compiled core and a pure-NumPy fallback.

The Cython extension is preferred when importable; set
``CIMX_KERNEL_BACKEND=numpy`` (or ``cython``) to force a backend, e.g. for
the benchmark in ``benchmarks/bench_kernels.py``. Both backends are
bit-identical for the same inputs.
"""

import os

from ._mapping import nn_indices
from . import _numpy_backend

_requested = os.environ.get("CIMX_KERNEL_BACKEND", "").strip().lower()
if _requested not in ("", "numpy", "cython"):
    raise ImportError(f"unknown CIMX_KERNEL_BACKEND {_requested!r}")

_impl = _numpy_backend
BACKEND = "numpy"
if _requested != "numpy":
    try:
        from . import _cython_backend as _compiled
    except ImportError:
        if _requested == "cython":
            raise
    else:
        _impl = _compiled
        BACKEND = "cython"

nn_resize = _impl.nn_resize
mask_bbox = _impl.mask_bbox

__all__ = ["BACKEND", "nn_indices", "nn_resize", "mask_bbox"]
