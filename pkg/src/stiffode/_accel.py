"""Numba switch.

Set ``STIFFODE_NUMBA=0`` before import to force the pure-numpy kernels.
"""
import os

_flag = os.environ.get("STIFFODE_NUMBA", "1").strip().lower()
USE_NUMBA = _flag not in ("0", "false", "no", "off")

if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        USE_NUMBA = False

if not USE_NUMBA:

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


def backend():
    return "numba" if USE_NUMBA else "numpy"
