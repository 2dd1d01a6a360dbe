"""Kernel backend selection.

The compiled Cython backend is used when its extension module imported
cleanly; otherwise the numpy reference backend. The TWINATTACK_BACKEND
environment variable ("python" or "compiled") forces a choice at import
time, and set_backend() switches at runtime (handy for tests and the
benchmark)."""

from __future__ import annotations

import os

from . import _kernel_py

try:
    from . import _kernel_c
except ImportError:
    _kernel_c = None

_BACKENDS = {"python": _kernel_py}
if _kernel_c is not None:
    _BACKENDS["compiled"] = _kernel_c

_active = _BACKENDS.get(os.environ.get("TWINATTACK_BACKEND", ""),
                        _BACKENDS.get("compiled", _kernel_py))


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def backend_name() -> str:
    return _active.NAME


def set_backend(name: str) -> None:
    global _active
    try:
        _active = _BACKENDS[name]
    except KeyError:
        raise ValueError(
            f"unknown backend {name!r}; available: {available_backends()}") from None


def get_backend(name: str | None = None):
    """The active kernel module, or a specific one by name."""
    if name is None:
        return _active
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(
            f"unknown backend {name!r}; available: {available_backends()}") from None
