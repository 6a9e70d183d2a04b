"""Kernel backend selection.

The convolution and pooling inner loops are compiled with numba when it is
importable. Setting ``DID2_NO_NUMBA=1`` in the environment (before import)
forces the pure-numpy implementations instead.
"""
import os

_disabled = os.environ.get("DID2_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError
    import numba

    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA


def njit(*args, **kwargs):
    """``numba.njit`` with caching, or a no-op decorator on the numpy path."""
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    return numba.njit(*args, **kwargs)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"


def set_threads(n):
    if HAVE_NUMBA and n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
