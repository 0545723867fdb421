"""Kernel backend selection.

``NGDENOISE_KERNELS=numpy`` forces the pure-numpy path; anything else (or the
variable being unset) uses numba when it imports, falling back to numpy.
"""
import logging
import os

from . import kernels_numpy

log = logging.getLogger(__name__)

_requested = os.environ.get("NGDENOISE_KERNELS", "numba").strip().lower()

if _requested == "numpy":
    kernels = kernels_numpy
    BACKEND = "numpy"
else:
    try:
        from . import kernels_numba as kernels
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a declared dependency
        log.warning("numba unavailable, using numpy kernels")
        kernels = kernels_numpy
        BACKEND = "numpy"
