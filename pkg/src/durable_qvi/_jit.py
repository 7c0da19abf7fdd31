"""Numba switch.

Set ``DURABLE_QVI_NO_NUMBA=1`` to run the pure-numpy kernels instead of the
compiled ones. The flag is read once at import time.
"""

import os

_flag = os.environ.get("DURABLE_QVI_NO_NUMBA", "").strip().lower()
USE_NUMBA = _flag not in ("1", "true", "yes", "on")

if USE_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover
        USE_NUMBA = False

# no nnan/ninf: kernels compare against inf sentinels
VEC_FASTMATH = {"contract", "arcp", "nsz", "reassoc", "afn"}

if USE_NUMBA:
    njit = numba.njit(cache=True, nogil=True)
    # float division without ZeroDivisionError branches, so loops vectorise
    njit_vec = numba.njit(cache=True, nogil=True, error_model="numpy", fastmath=VEC_FASTMATH)
else:  # pragma: no cover
    def njit(fn):
        return fn

    njit_vec = njit


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
