"""Numpy fallback for the compiled kernels.

Same signatures and semantics as ``_kernels``. Matrix products go through
numpy's BLAS, which is reproducible run to run on one machine but does not
promise the strict left-to-right reduction order of the compiled core.
"""

import numpy as np

BACKEND = "python"

MASK_PENALTY = np.float32(-1e9)

# rows of attention scores materialised at once; bounds peak memory
_ATTN_CHUNK = 256


def matmul(a, b):
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def softmax_rows(x, scale):
    x = np.asarray(x, dtype=np.float32)
    z = np.float32(scale) * x
    if z.shape[-1] == 0:
        return z.copy()
    z = z - z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def rms_norm(x, gain, eps):
    x = np.asarray(x, dtype=np.float32)
    gain = np.asarray(gain, dtype=np.float32)
    if x.shape[-1] != gain.shape[0]:
        raise ValueError(f"rms_norm length mismatch: {x.shape[-1]} vs gain {gain.shape[0]}")
    ms = np.mean(x * x, axis=-1, keepdims=True, dtype=np.float32)
    inv = np.float32(1.0) / np.sqrt(ms + np.float32(eps))
    return (x * inv * gain).astype(np.float32)


def silu(x):
    x = np.asarray(x, dtype=np.float32)
    return (x / (np.float32(1.0) + np.exp(-x))).astype(np.float32)


def rope_rotate(x, cos, sin, inverse):
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-1] % 2:
        raise ValueError(f"rope needs an even head dimension, got {x.shape[-1]}")
    n, _, d = x.shape
    if cos.shape != (n, d // 2) or sin.shape != (n, d // 2):
        raise ValueError("rope angle table does not match input")
    c = cos[:, None, :]
    s = -sin[:, None, :] if inverse else sin[:, None, :]
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * c - x1 * s
    out[..., 1::2] = x0 * s + x1 * c
    return out


def attention(q, k, v, allowed, scale):
    nq, n_heads, d = q.shape
    nk, n_kv, _ = k.shape
    if k.shape[2] != d or v.shape != k.shape:
        raise ValueError("attention: q/k/v shapes disagree")
    if n_heads % n_kv:
        raise ValueError("attention: n_heads must be a multiple of n_kv_heads")
    if allowed.shape != (nq, nk):
        raise ValueError(
            f"attention mask is {allowed.shape[0]}x{allowed.shape[1]}, expected {nq}x{nk}")
    out = np.zeros((nq, n_heads, d), dtype=np.float32)
    if nq == 0 or nk == 0:
        return out
    group = n_heads // n_kv
    allowed = allowed.astype(bool, copy=False)
    for start in range(0, nq, _ATTN_CHUNK):
        stop = min(start + _ATTN_CHUNK, nq)
        penalty = np.where(allowed[start:stop], np.float32(0.0), MASK_PENALTY)
        dead = ~allowed[start:stop].any(axis=1)
        for h in range(n_heads):
            g = h // group
            scores = q[start:stop, h, :] @ k[:, g, :].T
            probs = softmax_rows(scores + penalty, scale)
            probs[dead] = 0.0
            out[start:stop, h, :] = probs @ v[:, g, :]
    return out
