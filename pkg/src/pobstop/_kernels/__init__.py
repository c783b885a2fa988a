"""Backend selection for the hot loops.

The compiled extension is used when it imports; setting the environment
variable ``POBSTOP_BACKEND=python`` forces the numpy fallback.
"""

from __future__ import annotations

import os

from . import fallback

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

BACKENDS = ("compiled", "python")


def compiled_available() -> bool:
    return _core is not None


def default_backend() -> str:
    if os.environ.get("POBSTOP_BACKEND", "").strip().lower() == "python" or _core is None:
        return "python"
    return "compiled"


def resolve(backend: str | None = None) -> str:
    """Validate a backend request; ``None`` means the default."""
    if backend is None:
        return default_backend()
    if backend not in BACKENDS:
        raise ValueError(f"backend must be one of {BACKENDS}, got {backend!r}")
    if backend == "compiled" and _core is None:
        raise RuntimeError("compiled backend requested but the extension is not built")
    return backend


def module(backend: str | None = None):
    return _core if resolve(backend) == "compiled" else fallback
