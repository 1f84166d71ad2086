"""numba switch for the hot kernels.

Each hot kernel has a numba version and a pure-numpy version. The numba one
is used when numba is importable, unless ``INVOXEL_NO_NUMBA=1`` is set.
Both stay importable so tests and the benchmark can compare them.
"""
from __future__ import annotations

import os

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("INVOXEL_NO_NUMBA", "0") in ("", "0")


def njit(fn):
    if HAVE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
