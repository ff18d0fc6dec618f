"""Kernel backend selection: numba JIT or pure numpy/Python.

The hot kernels in this package are written as numba ``@njit`` functions.
Setting the environment variable ``SIGMAP_NUMBA=0`` (or running without
numba installed) makes the same functions execute as plain Python, which
is slow for the ray tracer but exercises identical code. The dense conv
kernels additionally have a vectorized numpy implementation that is used
automatically on the numpy path (see nnkernels).

``SIGMAP_NUMBA``: "1" force numba (ImportError if missing), "0" disable,
unset/"auto" use numba when importable.
"""

import os

_flag = os.environ.get("SIGMAP_NUMBA", "auto").strip().lower()

if _flag in ("0", "false", "off", "no"):
    _use_numba = False
elif _flag in ("1", "true", "on", "yes"):
    from numba import njit, prange  # noqa: F401

    _use_numba = True
else:
    try:
        from numba import njit, prange  # noqa: F401

        _use_numba = True
    except ImportError:
        _use_numba = False

if not _use_numba:
    prange = range

    def njit(*args, **kwargs):
        """No-op stand-in for numba.njit: returns the function unchanged."""
        if args and callable(args[0]) and len(args) == 1 and not kwargs:
            return args[0]

        def deco(func):
            return func

        return deco


def using_numba() -> bool:
    """True when kernels run JIT-compiled."""
    return _use_numba


def set_num_threads(n: int) -> None:
    """Limit kernel-level parallelism; no-op on the numpy path."""
    if _use_numba and n >= 1:
        import numba

        numba.set_num_threads(n)


def single_threaded_blas():
    """Context manager pinning BLAS to one thread.

    The training loop interleaves numba-parallel kernels with small BLAS
    matmuls; OpenBLAS worker threads busy-wait between calls and starve
    the numba threads, so single-threaded BLAS is faster there. No-op when
    threadpoolctl is unavailable.
    """
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        import contextlib

        return contextlib.nullcontext()
    return threadpool_limits(limits=1, user_api="blas")
