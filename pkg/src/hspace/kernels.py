"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback is imported. ``HSPACE_PURE_PYTHON=1`` forces the fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("HSPACE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"


def im2col(x, kh, kw, stride=1, pad=0, backend=None):
    """Unfold ``x`` of shape (N, C, H, W) into (C*kh*kw, N*Ho*Wo) patch columns."""
    impl = _select(backend)
    return impl.im2col(x, kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride=1, pad=0, backend=None):
    """Adjoint of :func:`im2col`: scatter-add columns back into an image of ``shape``."""
    impl = _select(backend)
    return impl.col2im(np.ascontiguousarray(cols), tuple(int(s) for s in shape), kh, kw, stride, pad)


def _select(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _kernels_py
    if backend == "cython":
        if BACKEND != "cython":
            raise RuntimeError("compiled kernels are not available")
        return _impl
    raise ValueError(f"unknown kernel backend {backend!r}")
