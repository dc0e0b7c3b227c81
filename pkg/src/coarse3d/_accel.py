"""Numba switch.

Kernels in :mod:`coarse3d.kernels` are compiled with numba when it is importable
and ``COARSE3D_NUMBA`` is not set to ``0``. Otherwise the pure-numpy paths run.
The flag is read once at import time.
"""

import os

try:
    from numba import njit as _numba_njit

    NUMBA_INSTALLED = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_INSTALLED = False

USE_NUMBA = NUMBA_INSTALLED and os.environ.get("COARSE3D_NUMBA", "1").strip().lower() not in (
    "0",
    "false",
    "no",
    "off",
)


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if NUMBA_INSTALLED:
        return _numba_njit(*args, **kwargs)

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def decorator(func):
        return func

    return decorator
