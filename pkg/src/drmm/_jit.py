"""Numba switch.

Set ``DRMM_DISABLE_JIT=1`` to run every kernel through its pure-numpy path.
The flag is read once at import time.
"""
import os

_FLAG = os.environ.get("DRMM_DISABLE_JIT", "").strip().lower()

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_JIT = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, otherwise the identity decorator."""
    if USE_JIT:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(fn):
        return fn
    return wrap


def set_threads(n):
    """Cap the BLAS/OpenMP pools at ``n`` threads (0 leaves them alone).

    The compiled kernels are serial, so numba's own pool is never started.
    Matrix products split work by output block, so results do not depend on
    the cap.
    """
    if n:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=int(n))
