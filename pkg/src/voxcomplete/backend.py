"""Kernel backend selection.

Hot inner loops (3D convolutions, ray traversal, nearest-neighbor distances)
exist twice: a numba @njit implementation and a vectorized pure-numpy one.
The environment variable VOXCOMPLETE_BACKEND picks which one the package
uses:

    auto   (default) numba if importable, else numpy
    numba  force numba, error if unavailable
    numpy  force the pure-numpy path

The flag is read once at import time; `selected_backend()` reports the
resolved choice.
"""

import os

from .errors import ConfigError

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    HAVE_NUMBA = False

_ENV_VAR = "VOXCOMPLETE_BACKEND"
_CHOICES = ("auto", "numba", "numpy")


def _resolve(value: str) -> str:
    value = value.strip().lower()
    if value not in _CHOICES:
        raise ConfigError(
            f"{_ENV_VAR} must be one of {_CHOICES}, got {value!r}"
        )
    if value == "auto":
        return "numba" if HAVE_NUMBA else "numpy"
    if value == "numba" and not HAVE_NUMBA:
        raise ConfigError("numba backend requested but numba is not importable")
    return value


_SELECTED = _resolve(os.environ.get(_ENV_VAR, "auto"))


def selected_backend() -> str:
    """Name of the kernel backend in use, 'numba' or 'numpy'."""
    return _SELECTED
