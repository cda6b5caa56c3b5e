"""Kernel backend selection.

The compiled extension is used when it imports; set ``OSDQUANT_PURE_PYTHON=1``
to force the NumPy fallback.
"""

import os
from types import ModuleType

from . import _kernels_py


def _load_compiled() -> ModuleType | None:
    if os.environ.get("OSDQUANT_PURE_PYTHON", "") not in ("", "0"):
        return None
    try:
        from . import _kernels_cy
    except ImportError:
        return None
    return _kernels_cy


_compiled = _load_compiled()
kernels: ModuleType = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "python"


def available() -> dict[str, ModuleType]:
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    else:
        try:
            from . import _kernels_cy
            out["cython"] = _kernels_cy
        except ImportError:
            pass
    return out


def use(name: str) -> None:
    """Switch the active backend (``"cython"`` or ``"python"``)."""
    global kernels, BACKEND
    backends = available()
    if name not in backends:
        raise ValueError(f"backend {name!r} not available; have {sorted(backends)}")
    kernels = backends[name]
    BACKEND = name
