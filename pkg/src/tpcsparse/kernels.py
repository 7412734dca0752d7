"""Backend selection for the hot kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementation in ``_pykernels`` is used.  Setting
``TPCSPARSE_BACKEND=python`` forces the fallback.
"""

from __future__ import annotations

import contextlib
import os
from types import ModuleType

from . import _pykernels

_impls: dict[str, ModuleType] = {"python": _pykernels}
try:
    from . import _ckernels  # type: ignore[attr-defined]

    _impls["cython"] = _ckernels
except ImportError:  # pragma: no cover - depends on build
    pass

AVAILABLE = tuple(sorted(_impls))

_requested = os.environ.get("TPCSPARSE_BACKEND", "").strip().lower()
if _requested and _requested not in _impls:
    raise ImportError(f"TPCSPARSE_BACKEND={_requested!r} is not available; have {AVAILABLE}")
BACKEND = _requested or ("cython" if "cython" in _impls else "python")
_active = _impls[BACKEND]


def active() -> str:
    return BACKEND


def set_backend(name: str) -> None:
    global BACKEND, _active
    if name not in _impls:
        raise ValueError(f"backend {name!r} not available; have {AVAILABLE}")
    BACKEND = name
    _active = _impls[name]


@contextlib.contextmanager
def use_backend(name: str):
    previous = BACKEND
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def kernel_pairs(in_coords, out_coords, offsets):
    return _active.kernel_pairs(in_coords, out_coords, offsets)


def segment_max(x, in_rows, out_rows, n_out):
    return _active.segment_max(x, in_rows, out_rows, n_out)


def scatter_arg(grad, arg, n_in):
    return _active.scatter_arg(grad, arg, n_in)
