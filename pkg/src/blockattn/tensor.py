"""Dense float32 numerics and kernel backend selection.

Matrices are plain C-contiguous ``np.float32`` arrays. The heavy kernels
come from the compiled ``_kernels`` extension when it is importable and
from the numpy implementation in ``_kernels_py`` otherwise. Set
``BLOCKATTN_BACKEND`` to ``compiled`` or ``python`` to force one.
"""

from __future__ import annotations

import logging
import os
from types import ModuleType

import numpy as np

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

log = logging.getLogger(__name__)

BACKENDS = ("compiled", "python")


def _pick(name: str) -> ModuleType:
    if name == "python":
        return _kernels_py
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels requested but blockattn._kernels is not built")
        return _compiled
    if name == "auto":
        return _compiled if _compiled is not None else _kernels_py
    raise ValueError(f"unknown backend {name!r}; expected auto, compiled or python")


_active = _pick(os.environ.get("BLOCKATTN_BACKEND", "auto"))
if _active is _kernels_py:
    log.debug("using numpy fallback kernels")


def kernels() -> ModuleType:
    return _active


def backend() -> str:
    return _active.BACKEND


def available_backends() -> list[str]:
    return [b for b in BACKENDS if b == "python" or _compiled is not None]


def set_backend(name: str) -> str:
    """Switch the process-wide kernel backend; returns the previous name."""
    global _active
    previous = _active.BACKEND
    _active = _pick(name)
    return previous


def as_matrix(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return _active.matmul(a, b)


def softmax_rows(m, scale: float = 1.0) -> np.ndarray:
    m = as_matrix(m)
    if m.ndim == 1:
        return _active.softmax_rows(m[None, :], float(scale))[0]
    return _active.softmax_rows(m, float(scale))


def rms_norm(x, gain, eps: float = 1e-5) -> np.ndarray:
    x = as_matrix(x)
    gain = as_matrix(gain)
    if x.shape[-1] != gain.shape[-1]:
        raise ValueError(f"rms_norm length mismatch: {x.shape} vs gain {gain.shape}")
    if x.ndim == 1:
        return _active.rms_norm(x[None, :], gain, float(eps))[0]
    return _active.rms_norm(x, gain, float(eps))


def silu(x) -> np.ndarray:
    return _active.silu(as_matrix(x))
