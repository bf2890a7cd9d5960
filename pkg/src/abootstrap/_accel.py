"""Numba switch.

Set ``ABOOT_DISABLE_NUMBA=1`` to force the pure-numpy fallbacks. The flag is read
once at import time; kernels compiled with :func:`njit` become plain Python
functions when numba is disabled or missing.
"""
import os

_FLAG = os.environ.get("ABOOT_DISABLE_NUMBA", "").strip().lower()
DISABLED = _FLAG in ("1", "true", "yes", "on")

try:
    if DISABLED:
        raise ImportError
    import numba as _numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _numba = None
    HAVE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity otherwise."""
    if HAVE_NUMBA:
        return _numba.njit(*args, cache=True, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def backend_name():
    return "numba" if HAVE_NUMBA else "numpy"
