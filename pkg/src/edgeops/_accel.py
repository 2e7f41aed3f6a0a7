"""Backend switch for the hot per-sample kernels.

Set ``EDGEOPS_NO_NUMBA=1`` to force the pure-numpy path. When numba is not
importable the numpy path is used automatically.
"""

from __future__ import annotations

import os

_FALSY = ("", "0", "false", "no", "off")

try:  # pragma: no cover - exercised implicitly
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

BACKENDS = ("numba", "numpy")


def default_backend() -> str:
    if os.environ.get("EDGEOPS_NO_NUMBA", "").strip().lower() not in _FALSY:
        return "numpy"
    return "numba" if HAVE_NUMBA else "numpy"


def resolve_backend(name: str | None) -> str:
    if name is None:
        return default_backend()
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")
    if name == "numba" and not HAVE_NUMBA:
        return "numpy"
    return name


if HAVE_NUMBA:
    from numba import njit
else:  # pragma: no cover

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
