"""Backend switch for the hot kernels.

Kernels in :mod:`mcgdiff.kernels` come in two flavours: a numba ``@njit``
loop and a vectorised numpy path. The numba path is used when numba imports
cleanly, unless ``MCGDIFF_DISABLE_NUMBA`` is set to a truthy value before the
package is imported. The flag only picks an implementation; both paths compute
the same quantities and never change run semantics.
"""
from __future__ import annotations

import os

_TRUTHY = {"1", "true", "yes", "on"}

try:  # pragma: no cover - exercised implicitly
    import numba as _numba

    NUMBA_AVAILABLE = True
except Exception:  # pragma: no cover
    _numba = None
    NUMBA_AVAILABLE = False

_disabled = os.environ.get("MCGDIFF_DISABLE_NUMBA", "").strip().lower() in _TRUTHY
_backend = "numba" if (NUMBA_AVAILABLE and not _disabled) else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if _numba is not None:
        return _numba.njit(*args, **kwargs)

    def _wrap(func):
        return func

    if args and callable(args[0]) and len(args) == 1 and not kwargs:
        return args[0]
    return _wrap


def backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Switch backend at runtime; returns the previous one (used by benchmarks/tests)."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not installed")
    previous, _backend = _backend, name
    return previous


def use_numba() -> bool:
    return _backend == "numba"
