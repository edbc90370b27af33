"""Backend selection for the geometry hot loops.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy fallback. Set ``CARIME_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _fallback

if os.environ.get("CARIME_PURE_PYTHON"):
    _compiled = None
else:
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"
_impl = _compiled if _compiled is not None else _fallback


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def bilinear_warp(img, residual, backend=None):
    """Backward bilinear warp with border clamp. ``img`` is H×W×C, ``residual`` H×W×2 (normalized)."""
    impl = _pick(backend)
    return impl.bilinear_warp(_f64(img), _f64(residual))


def tps_dense(ctrl, weights, affine, height, width, coord_scale, backend=None):
    impl = _pick(backend)
    return impl.tps_dense(_f64(ctrl), _f64(weights), _f64(affine), int(height), int(width),
                          float(coord_scale))


def mean_displacement_norm(residual, half_w, half_h, backend=None):
    impl = _pick(backend)
    return float(impl.mean_displacement_norm(_f64(residual), float(half_w), float(half_h)))


def _pick(backend):
    if backend is None:
        return _impl
    if backend == "numpy":
        return _fallback
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available in this install")
        return _compiled
    raise ValueError(f"unknown backend {backend!r}")


def available_backends():
    return ["numpy"] + (["cython"] if _compiled is not None else [])
