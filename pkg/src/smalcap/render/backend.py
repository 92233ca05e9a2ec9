"""Kernel backend selection.

The compiled extension is used when importable; set ``SMALCAP_BACKEND=python``
to force the numpy fallback.
"""

import os

from . import _kernels_py as python_kernels

try:
    from . import _raster as compiled_kernels
except ImportError:  # pragma: no cover - depends on the build
    compiled_kernels = None

_BACKENDS = {"python": python_kernels}
if compiled_kernels is not None:
    _BACKENDS["compiled"] = compiled_kernels


def available_backends():
    return list(_BACKENDS)


def get_kernels(name=None):
    if name is None:
        return kernels
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown or unavailable backend {name!r}") from None


_requested = os.environ.get("SMALCAP_BACKEND", "").strip().lower()
if _requested:
    BACKEND = _requested
else:
    BACKEND = "compiled" if compiled_kernels is not None else "python"
kernels = get_kernels(BACKEND)
