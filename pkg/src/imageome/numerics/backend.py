"""Kernel backend selection.

The compiled extension is preferred; ``IMAGEOME_BACKEND=python`` forces the
numpy fallback, ``IMAGEOME_BACKEND=cython`` makes a missing extension fatal.
"""
import logging
import os

from . import _pykernels

log = logging.getLogger(__name__)

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_choice = os.environ.get("IMAGEOME_BACKEND", "auto").lower()
if _choice == "python" or (_choice == "auto" and _ckernels is None):
    kernels = _pykernels
elif _ckernels is None:
    raise ImportError("IMAGEOME_BACKEND=cython but imageome.numerics._ckernels is not built")
else:
    kernels = _ckernels

name = "cython" if kernels is _ckernels else "python"


def use(which: str):
    """Switch kernels at runtime ('python' or 'cython'); used by tests and benchmarks."""
    global kernels, name
    if which == "python":
        kernels, name = _pykernels, "python"
    elif which == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels unavailable")
        kernels, name = _ckernels, "cython"
    else:
        raise ValueError(f"unknown backend {which!r}")


def available() -> list:
    return ["python"] + (["cython"] if _ckernels is not None else [])
