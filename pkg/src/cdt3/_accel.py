"""Backend switch for the hot kernels.

Set ``CDT3_DISABLE_NUMBA=1`` before import to force the pure-numpy path.
Numba is also skipped silently when it is not importable.
"""

from __future__ import annotations

import functools
import os

_DISABLED = os.environ.get("CDT3_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by CDT3_DISABLE_NUMBA")
    from numba import njit as _njit

    NUMBA_OK = True
except ImportError:
    NUMBA_OK = False
    _njit = None


def njit(fn=None, **kwargs):
    """``numba.njit`` with caching, or a no-op when numba is off."""
    if fn is None:
        return functools.partial(njit, **kwargs)
    if not NUMBA_OK:
        return fn
    kwargs.setdefault("cache", True)
    return _njit(**kwargs)(fn)


def backend() -> str:
    return "numba" if NUMBA_OK else "numpy"


__all__ = ["NUMBA_OK", "backend", "njit"]
