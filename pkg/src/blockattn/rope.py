"""Rotary position encoding over adjacent dimension pairs.

Pair ``(x[2j], x[2j+1])`` at position ``i`` is rotated counterclockwise by
``i * theta_j`` with ``theta_j = base ** (-2j/d)``. Cached keys are stored as
if their block started at position 0; moving them to a new offset is a
forward rotation by that offset.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import tensor


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    theta_base: float = 10000.0

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2:
            raise ValueError(f"rope head_dim must be even and >= 2, got {self.head_dim}")
        if not self.theta_base > 1.0:
            raise ValueError(f"rope theta_base must exceed 1, got {self.theta_base}")

    @cached_property
    def thetas(self) -> np.ndarray:
        """Per-pair angular frequencies, float64, strictly decreasing."""
        j = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.theta_base ** (-2.0 * j / self.head_dim)


def angle_table(positions, params: RopeParams) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape [n, d/2] for integer ``positions``.

    Angles are formed in float64 and only the results are rounded to float32,
    so large positions lose no accuracy in the angle itself.
    """
    pos = np.asarray(positions, dtype=np.int64).reshape(-1)
    if pos.size and pos.min() < 0:
        raise ValueError("rope positions must be non-negative")
    angles = pos.astype(np.float64)[:, None] * params.thetas[None, :]
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def _as_heads(x, params: RopeParams) -> tuple[np.ndarray, tuple[int, ...]]:
    arr = np.asarray(x, dtype=np.float32)
    if arr.shape[-1] % 2:
        raise ValueError(f"rope needs an even-length head vector, got {arr.shape[-1]}")
    if arr.shape[-1] != params.head_dim:
        raise ValueError(f"head vector length {arr.shape[-1]} != head_dim {params.head_dim}")
    shape = arr.shape
    if arr.ndim == 1:
        arr = arr.reshape(1, 1, -1)
    elif arr.ndim == 2:
        arr = arr.reshape(arr.shape[0], 1, -1)
    return np.ascontiguousarray(arr), shape


def rotate(x, positions, params: RopeParams, inverse: bool = False) -> np.ndarray:
    """Rotate ``x`` of shape [n, heads, d] (or [n, d]) row-wise by ``positions``.

    ``positions`` is either one index per row or a single index broadcast to
    every row. ``inverse`` rotates clockwise, undoing a forward rotation.
    """
    arr, shape = _as_heads(x, params)
    pos = np.asarray(positions, dtype=np.int64).reshape(-1)
    if pos.size == 1 and arr.shape[0] != 1:
        cos, sin = angle_table(pos, params)
        cos = np.ascontiguousarray(np.broadcast_to(cos, (arr.shape[0], cos.shape[1])))
        sin = np.ascontiguousarray(np.broadcast_to(sin, (arr.shape[0], sin.shape[1])))
    else:
        if pos.size != arr.shape[0]:
            raise ValueError(f"{pos.size} positions for {arr.shape[0]} rows")
        cos, sin = angle_table(pos, params)
    out = tensor.kernels().rope_rotate(arr, cos, sin, bool(inverse))
    return np.asarray(out).reshape(shape)


def rope_apply(x, i: int, params: RopeParams) -> np.ndarray:
    """Encode head vector(s) ``x`` at position ``i``."""
    if i < 0:
        raise ValueError(f"position must be non-negative, got {i}")
    return rotate(x, i, params)


def rope_unapply(x, i: int, params: RopeParams) -> np.ndarray:
    """Reset vector(s) encoded at position ``i`` back to position zero."""
    if i < 0:
        raise ValueError(f"position must be non-negative, got {i}")
    return rotate(x, i, params, inverse=True)


def rope_shift(k_zero, i_delta: int, params: RopeParams) -> np.ndarray:
    """Move zero-positioned vector(s) to position ``i_delta``."""
    if i_delta < 0:
        raise ValueError(f"target position must be non-negative, got {i_delta}")
    return rotate(k_zero, i_delta, params)


def reposition(x, i: int, i_delta: int, params: RopeParams) -> np.ndarray:
    """Re-encode vector(s) from position ``i`` to ``i_delta``: zero first, then rotate."""
    return rope_shift(rope_unapply(x, i, params), i_delta, params)
