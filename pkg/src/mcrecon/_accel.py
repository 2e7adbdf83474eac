"""Numba switch.

Hot kernels are written twice: a loop version compiled with ``@njit`` and a
vectorised numpy version. ``MCR_DISABLE_NUMBA=1`` (or numba missing) selects
the numpy path everywhere. Both paths must agree to floating point rounding.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("MCR_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity otherwise.

    Compiled functions are cached on disk so repeated test runs skip the JIT.
    """
    kwargs.setdefault("cache", True)

    def deco(func):
        if HAVE_NUMBA:
            return numba.njit(*args, **kwargs)(func)
        return func

    return deco


def worker_count():
    """Thread cap from ``MCR_THREADS`` (default 1)."""
    try:
        n = int(os.environ.get("MCR_THREADS", "1"))
    except ValueError:
        n = 1
    return max(1, n)
