"""Kernel backend selection.

The hot numerical kernels (Hermitian eigensolver, propagator application,
commutator expectations) exist twice: a compiled Cython extension
(``ilc.kernels._cyk``) and a pure-numpy fallback (``ilc.kernels.pure``).
The active backend is chosen once at import time:

* ``ILC_KERNELS=compiled`` requires the extension and fails if missing,
* ``ILC_KERNELS=pure`` forces the fallback,
* unset or ``auto`` picks the extension when available.

``active`` is the selected module; both implementations stay importable for
cross-checking and benchmarks.
"""
from __future__ import annotations

import os

from . import pure

try:
    from . import _cyk as compiled
except ImportError:
    compiled = None

_choice = os.environ.get("ILC_KERNELS", "auto").strip().lower()
if _choice == "pure":
    active = pure
elif _choice == "compiled":
    if compiled is None:
        raise ImportError(
            "ILC_KERNELS=compiled but the ilc.kernels._cyk extension is not "
            "built; reinstall with a C compiler or use ILC_KERNELS=pure")
    active = compiled
elif _choice == "auto":
    active = compiled if compiled is not None else pure
else:
    raise ImportError(f"unknown ILC_KERNELS value {_choice!r}")

BACKEND = active.NAME

__all__ = ["active", "pure", "compiled", "BACKEND"]
