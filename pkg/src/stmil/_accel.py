"""numba switch.

Set ``STMIL_DISABLE_NUMBA=1`` to force the pure-numpy kernels (also used
automatically when numba cannot be imported).
"""
import os

USE_NUMBA = os.environ.get("STMIL_DISABLE_NUMBA", "").strip().lower() not in ("1", "true", "yes")

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None
    USE_NUMBA = False

HAS_NUMBA = numba is not None


def njit(func):
    """``numba.njit(cache=True)`` when numba is available, else the function itself."""
    if numba is None:
        return func
    return numba.njit(cache=True)(func)
