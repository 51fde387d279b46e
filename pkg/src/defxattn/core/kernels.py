"""Kernel backend selection.

The compiled extension is preferred; the numpy module is used when it cannot
be imported or when ``DEFXATTN_KERNELS=python`` is set. ``DEFXATTN_KERNELS=cython``
makes a missing extension an import error instead of a silent fallback.
"""

import contextlib
import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels


def _initial_backend():
    wanted = os.environ.get("DEFXATTN_KERNELS", "auto").lower()
    if wanted == "auto":
        return "cython" if "cython" in _BACKENDS else "python"
    if wanted not in ("python", "cython"):
        raise ImportError(f"DEFXATTN_KERNELS must be auto, python or cython, got {wanted!r}")
    if wanted not in _BACKENDS:
        raise ImportError("DEFXATTN_KERNELS=cython but the compiled extension is not built")
    return wanted


_active = _initial_backend()


def available_backends():
    return sorted(_BACKENDS)


def backend():
    return _active


def set_backend(name):
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}")
    _active = name


@contextlib.contextmanager
def use_backend(name):
    previous = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def trilinear_forward(x, coords):
    return _BACKENDS[_active].trilinear_forward(_c(x), _c(coords))


def trilinear_backward(x, coords, grad_out):
    return _BACKENDS[_active].trilinear_backward(_c(x), _c(coords), _c(grad_out))


def im2col3d(x, k, stride):
    return _BACKENDS[_active].im2col3d(_c(x), int(k), int(stride))


def col2im3d(cols, shape, k, stride):
    return _BACKENDS[_active].col2im3d(_c(cols), tuple(int(s) for s in shape), int(k), int(stride))
