"""Kernel backend selection.

The compiled kernels handle :class:`AffineRadialModel`; every other model,
or any run with ``SWEEPOPT_BACKEND=python``, uses the pure-Python kernels.
"""

import os

from . import _pykernels
from .instance import AffineRadialModel

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

HAVE_COMPILED = _ckernels is not None


def requested() -> str:
    return os.environ.get("SWEEPOPT_BACKEND", "auto").lower()


def kernels_for(model, backend: str = None):
    """Return the kernel module for ``model`` (``auto``, ``python`` or ``compiled``)."""
    backend = (backend or requested()).lower()
    if backend == "python":
        return _pykernels
    usable = HAVE_COMPILED and isinstance(model, AffineRadialModel)
    if backend == "compiled" and not usable:
        raise RuntimeError("compiled kernels unavailable for this model")
    return _ckernels if usable else _pykernels


def name_of(kernels) -> str:
    return "compiled" if kernels is _ckernels and _ckernels is not None else "python"
