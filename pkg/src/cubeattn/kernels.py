"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
NumPy backend. ``CUBEATTN_BACKEND=python`` forces the fallback.
"""
from __future__ import annotations

import os
from types import ModuleType

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS: dict[str, ModuleType] = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels


def available() -> list[str]:
    return list(_BACKENDS)


def _default_name() -> str:
    forced = os.environ.get("CUBEATTN_BACKEND")
    if forced:
        if forced not in _BACKENDS:
            raise RuntimeError(f"CUBEATTN_BACKEND={forced!r} not available (have {available()})")
        return forced
    return "cython" if "cython" in _BACKENDS else "python"


DEFAULT = _default_name()


def get(name: str | None = None) -> ModuleType:
    name = name or DEFAULT
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available()}") from None
