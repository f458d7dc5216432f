"""Numba switch.

Set ``DASH_NUMBA=0`` before import to force the pure-numpy kernels. When numba
cannot be imported the numpy path is used as well.
"""

import os

_flag = os.environ.get("DASH_NUMBA", "1").strip().lower()
USE_NUMBA = _flag not in ("0", "false", "no", "off")

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None
    USE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` with cached compilation; identity when numba is absent."""
    kwargs.setdefault("cache", True)
    if numba is None:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    return numba.njit(*args, **kwargs)


def set_threads(n):
    """Cap worker threads for numba kernels. ``n <= 0`` leaves the default."""
    if numba is None or n is None or n <= 0:
        return
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def backend():
    return "numba" if USE_NUMBA else "numpy"
