"""
Numba shim.

Hot kernels are written once as plain numpy-compatible loops and decorated with
``njit``. Setting ``OMNILAB_PURE_NUMPY=1`` (or running without numba installed)
turns the decorator into a passthrough, and callers in ``kernels`` switch to
their vectorised numpy implementations instead of the loop versions.
"""
import os
import warnings

_DISABLED = os.environ.get("OMNILAB_PURE_NUMPY", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("disabled by OMNILAB_PURE_NUMPY")
    from numba import njit, prange

    NUMBA_ENABLED = True
except ImportError as exc:
    if not _DISABLED:
        warnings.warn(f"numba unavailable ({exc}); using numpy kernels")
    NUMBA_ENABLED = False
    prange = range

    def njit(*args, **kw):
        if len(args) == 1 and callable(args[0]) and not kw:
            return args[0]
        return lambda f: f


__all__ = ["NUMBA_ENABLED", "njit", "prange"]
