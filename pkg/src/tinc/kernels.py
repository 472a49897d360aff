"""Backend selection for the conv2d hot kernels.

The compiled Cython extension is preferred when importable; otherwise the
numpy im2col fallback is used. ``TINC_KERNELS`` overrides the choice:
``auto`` (default), ``ext``, or ``numpy``. Both backends take float64
C-contiguous NCHW arrays and return float64 arrays.
"""

import os

import numpy as np

from tinc import _kernels_np

try:
    from tinc import _kernels_ext
except ImportError:
    _kernels_ext = None

_BACKENDS = {"numpy": _kernels_np}
if _kernels_ext is not None:
    _BACKENDS["ext"] = _kernels_ext

HAVE_EXT = _kernels_ext is not None


def get_backend(name):
    """Return the kernel module for an explicit backend name."""
    if name not in _BACKENDS:
        raise ValueError(
            f"kernel backend {name!r} unavailable (have: {sorted(_BACKENDS)})")
    return _BACKENDS[name]


def _select():
    mode = os.environ.get("TINC_KERNELS", "auto")
    if mode == "auto":
        return "ext" if HAVE_EXT else "numpy"
    if mode not in ("ext", "numpy"):
        raise ValueError(f"TINC_KERNELS must be auto|ext|numpy, got {mode!r}")
    return mode


BACKEND = _select()
_impl = get_backend(BACKEND)


def _as_c64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x, w, stride=1, pad=0):
    return _impl.conv2d_forward(_as_c64(x), _as_c64(w), stride, pad)


def conv2d_backward_input(gy, w, stride, pad, h, wi):
    return _impl.conv2d_backward_input(_as_c64(gy), _as_c64(w), stride, pad, h, wi)


def conv2d_backward_weight(x, gy, stride, pad, kh, kw):
    return _impl.conv2d_backward_weight(_as_c64(x), _as_c64(gy), stride, pad, kh, kw)
