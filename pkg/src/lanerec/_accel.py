"""Numba switch.

Hot kernels are written as plain loops and compiled with ``numba.njit`` when
numba is importable. Setting ``LANEREC_DISABLE_NUMBA=1`` selects the
pure-numpy implementations instead (useful for debugging and for
cross-checking the two paths).
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

_FLAG = os.environ.get("LANEREC_DISABLE_NUMBA", "").strip().lower()

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and _FLAG not in {"1", "true", "yes", "on"}


def njit(func):
    """Compile ``func`` in nopython mode if numba is available, else return it."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True)(func)
