"""Backend selection for the leapfrog stepping kernels.

The compiled extension is preferred; the numpy fallback is selected when the
extension is missing or when BEAMTOMO_KERNELS=python is set. Both expose
advance_1d / advance_2d with identical semantics.
"""

import os

from . import _kernels_py

try:
    from . import _kernels
    _HAVE_COMPILED = True
except ImportError:
    _kernels = None
    _HAVE_COMPILED = False

_backend_name = "python"
_backend = _kernels_py
if _HAVE_COMPILED and os.environ.get("BEAMTOMO_KERNELS", "").lower() != "python":
    _backend_name = "cython"
    _backend = _kernels


def backend_name():
    return _backend_name


def available_backends():
    return ("cython", "python") if _HAVE_COMPILED else ("python",)


def use(name):
    """Switch kernel backend; returns the previously active name."""
    global _backend, _backend_name
    prev = _backend_name
    if name == "cython":
        if not _HAVE_COMPILED:
            raise RuntimeError("compiled kernels are not available")
        _backend, _backend_name = _kernels, "cython"
    elif name == "python":
        _backend, _backend_name = _kernels_py, "python"
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    return prev


def get(name=None):
    """Return the kernel module for `name` (default: the active backend)."""
    if name is None:
        return _backend
    if name == "cython":
        if not _HAVE_COMPILED:
            raise RuntimeError("compiled kernels are not available")
        return _kernels
    if name == "python":
        return _kernels_py
    raise ValueError(f"unknown kernel backend {name!r}")


def advance_1d(*args):
    return _backend.advance_1d(*args)


def advance_2d(*args):
    return _backend.advance_2d(*args)
