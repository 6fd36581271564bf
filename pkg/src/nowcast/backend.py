"""Kernel backend selection.

The convolution and advection inner loops exist twice: a numba-jitted
version and a pure-numpy fallback.  ``NOWCAST_BACKEND=numpy`` or
``NOWCAST_BACKEND=numba`` pins the choice; the default is numba when it
imports, numpy otherwise.  Both paths implement identical contracts, so
everything above this module is backend-agnostic.
"""

import os

from . import _kernels_numpy

_VALID = ("numba", "numpy")


def _load(name):
    if name == "numpy":
        return _kernels_numpy
    from . import _kernels_numba
    return _kernels_numba


def _initial_choice():
    env = os.environ.get("NOWCAST_BACKEND", "").strip().lower()
    if env:
        if env not in _VALID:
            raise ValueError(f"NOWCAST_BACKEND must be one of {_VALID}, got {env!r}")
        if env == "numba":
            return "numba", _load("numba")
        return "numpy", _load("numpy")
    try:
        return "numba", _load("numba")
    except ImportError:
        return "numpy", _load("numpy")


_name, _mod = _initial_choice()


def backend_name():
    return _name


def set_backend(name):
    """Swap kernel implementations at runtime (tests and benchmarks)."""
    global _name, _mod
    if name not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {name!r}")
    _mod = _load(name)
    _name = name


def conv_gather(xp, w, stride):
    return _mod.conv_gather(xp, w, stride)


def conv_scatter(dy, w, stride, hz, wz):
    return _mod.conv_scatter(dy, w, stride, hz, wz)


def conv_wgrad(dy, xp, stride, kh, kw):
    return _mod.conv_wgrad(dy, xp, stride, kh, kw)


def warp_bilinear(field, x_src, y_src):
    return _mod.warp_bilinear(field, x_src, y_src)
