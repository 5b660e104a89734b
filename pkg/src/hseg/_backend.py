"""Kernel backend selection.

``HSEG_BACKEND=numpy`` forces the pure-numpy kernels. Any other value (or unset)
uses numba when it imports cleanly. ``HSEG_THREADS`` caps numba's thread pool;
0 or unset means one thread, which is the bitwise-reproducible mode.
"""
import os

_requested = os.environ.get("HSEG_BACKEND", "numba").strip().lower()

try:
    if _requested == "numpy":
        raise ImportError("numba disabled by HSEG_BACKEND")
    import numba

    # skip numba's TBB probe; the OpenMP layer is always shipped on Linux wheels
    if os.environ.get("NUMBA_THREADING_LAYER") is None:
        numba.config.THREADING_LAYER = "omp"
    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def thread_count():
    raw = os.environ.get("HSEG_THREADS", "").strip()
    if not raw:
        return 0
    n = int(raw)
    if n < 0:
        raise ValueError(f"HSEG_THREADS must be >= 0, got {n}")
    return n


def configure_threads():
    if not HAVE_NUMBA:
        return
    n = thread_count()
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)) if n else 1)
