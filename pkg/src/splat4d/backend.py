"""Kernel backend selection: numba-JIT hot loops with a pure-numpy fallback.

The numba path is the default. Set ``SPLAT4D_NO_NUMBA=1`` (or call
:func:`set_numba_enabled`) to force the pure-numpy kernels; results agree to
floating-point roundoff but the numpy path is much slower on large scenes.
``benchmarks/bench_rasterizer.py`` compares the two.
"""

import os

_env = os.environ.get("SPLAT4D_NO_NUMBA", "").strip().lower()
_DISABLED_BY_ENV = _env in ("1", "true", "yes", "on")

try:
    if _DISABLED_BY_ENV:
        raise ImportError("numba disabled via SPLAT4D_NO_NUMBA")
    from numba import njit, prange  # noqa: F401

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        """Decorator stub so kernel modules import cleanly without numba."""
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap

    prange = range  # type: ignore[assignment]

_numba_enabled = HAVE_NUMBA


def numba_enabled() -> bool:
    return _numba_enabled


def set_numba_enabled(flag: bool) -> None:
    """Toggle the JIT path at runtime (used by tests and the benchmark)."""
    global _numba_enabled
    if flag and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is unavailable")
    _numba_enabled = flag


def active_backend() -> str:
    return "numba" if _numba_enabled else "numpy"
