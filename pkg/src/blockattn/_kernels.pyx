# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled float32 kernels.

Every reduction runs in a fixed order (left to right over the reduced
index), so results are bit-reproducible on one platform. Loops are arranged
so the compiler can vectorise across independent outputs without
reassociating any sum.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrtf
from libc.stdlib cimport malloc, free

cnp.import_array()

BACKEND = "compiled"

cdef float MASK_PENALTY = -1e9

cdef extern from *:
    """
    #include <stdint.h>
    #include <string.h>
    /* exp for float32 with Cody-Waite reduction and a degree-6 polynomial;
       branch-free so loops calling it vectorise. Relative error < 2 ulp.
       Inputs below -87 return exactly 0, as a true exp would underflow to
       (a denormal or) zero; masked scores therefore carry no weight at all. */
    static inline float ba_expf(float x) {
        float under = x < -87.0f ? 0.0f : 1.0f;
        x = x < -87.0f ? -87.0f : x;
        x = x > 88.0f ? 88.0f : x;
        float n = __builtin_floorf(x * 1.44269504088896341f + 0.5f);
        float r = x - n * 0.693359375f;
        r = r - n * -2.12194440e-4f;
        float p = 1.9875691500e-4f;
        p = p * r + 1.3981999507e-3f;
        p = p * r + 8.3334519073e-3f;
        p = p * r + 4.1665795894e-2f;
        p = p * r + 1.6666665459e-1f;
        p = p * r + 5.0000001201e-1f;
        p = p * r * r + r + 1.0f;
        int32_t bits = ((int32_t) n + 127) << 23;
        float scale;
        memcpy(&scale, &bits, sizeof(scale));
        return p * scale * under;
    }
    static inline float ba_maxf(float a, float b) { return b > a ? b : a; }

    /* Packed GEMM. C += A * B with every C element accumulated over k in
       increasing order, one product at a time, so the result does not depend
       on the blocking below. */
    #include <stdlib.h>
    #include <stddef.h>
    typedef float ba_v16 __attribute__((vector_size(64)));
    typedef float ba_v16u __attribute__((vector_size(64), aligned(4)));
    #define BA_MR 8
    #define BA_NR 32
    #define BA_KC 256
    #define BA_MC 512

    static void *ba_alloc(size_t bytes) {
        size_t sz = (bytes + 63) & ~(size_t)63;
        return aligned_alloc(64, sz ? sz : 64);
    }

    static void ba_pack_a(const float *a, ptrdiff_t lda, ptrdiff_t mc, ptrdiff_t kc, float *ap) {
        for (ptrdiff_t i0 = 0; i0 < mc; i0 += BA_MR) {
            ptrdiff_t rows = mc - i0 < BA_MR ? mc - i0 : BA_MR;
            for (ptrdiff_t k = 0; k < kc; k++) {
                ptrdiff_t r = 0;
                for (; r < rows; r++) ap[k * BA_MR + r] = a[(i0 + r) * lda + k];
                for (; r < BA_MR; r++) ap[k * BA_MR + r] = 0.0f;
            }
            ap += kc * BA_MR;
        }
    }

    static void ba_pack_b(const float *b, ptrdiff_t ldb, ptrdiff_t kc, ptrdiff_t nc, float *bp) {
        for (ptrdiff_t j0 = 0; j0 < nc; j0 += BA_NR) {
            ptrdiff_t cols = nc - j0 < BA_NR ? nc - j0 : BA_NR;
            for (ptrdiff_t k = 0; k < kc; k++) {
                const float *src = b + k * ldb + j0;
                float *dst = bp + k * BA_NR;
                ptrdiff_t c = 0;
                for (; c < cols; c++) dst[c] = src[c];
                for (; c < BA_NR; c++) dst[c] = 0.0f;
            }
            bp += kc * BA_NR;
        }
    }

    static inline void ba_micro(ptrdiff_t kc, const float *ap, const float *bp,
                                float *c, ptrdiff_t ldc) {
        ba_v16 acc[BA_MR][2];
        #pragma GCC unroll 8
        for (int r = 0; r < BA_MR; r++) {
            acc[r][0] = *(const ba_v16u *)(c + r * ldc);
            acc[r][1] = *(const ba_v16u *)(c + r * ldc + 16);
        }
        for (ptrdiff_t k = 0; k < kc; k++) {
            ba_v16 b0 = *(const ba_v16 *)(bp + k * BA_NR);
            ba_v16 b1 = *(const ba_v16 *)(bp + k * BA_NR + 16);
            #pragma GCC unroll 8
            for (int r = 0; r < BA_MR; r++) {
                float av = ap[k * BA_MR + r];
                acc[r][0] += av * b0;
                acc[r][1] += av * b1;
            }
        }
        #pragma GCC unroll 8
        for (int r = 0; r < BA_MR; r++) {
            *(ba_v16u *)(c + r * ldc) = acc[r][0];
            *(ba_v16u *)(c + r * ldc + 16) = acc[r][1];
        }
    }

    static int ba_sgemm(ptrdiff_t m, ptrdiff_t n, ptrdiff_t kk, const float *a, ptrdiff_t lda,
                        const float *b, ptrdiff_t ldb, float *c, ptrdiff_t ldc) {
        if (m <= 0 || n <= 0 || kk <= 0) return 0;
        ptrdiff_t kcmax = kk < BA_KC ? kk : BA_KC;
        ptrdiff_t mcmax = m < BA_MC ? m : BA_MC;
        ptrdiff_t npad = (n + BA_NR - 1) / BA_NR * BA_NR;
        ptrdiff_t mpad = (mcmax + BA_MR - 1) / BA_MR * BA_MR;
        float *bp = ba_alloc(sizeof(float) * (size_t)(npad * kcmax));
        float *ap = ba_alloc(sizeof(float) * (size_t)(mpad * kcmax));
        float tile[BA_MR * BA_NR] __attribute__((aligned(64)));
        if (!bp || !ap) { free(bp); free(ap); return -1; }
        for (ptrdiff_t pc = 0; pc < kk; pc += BA_KC) {
            ptrdiff_t kc = kk - pc < BA_KC ? kk - pc : BA_KC;
            ba_pack_b(b + pc * ldb, ldb, kc, n, bp);
            for (ptrdiff_t ic = 0; ic < m; ic += BA_MC) {
                ptrdiff_t mc = m - ic < BA_MC ? m - ic : BA_MC;
                ba_pack_a(a + ic * lda + pc, lda, mc, kc, ap);
                for (ptrdiff_t j0 = 0; j0 < n; j0 += BA_NR) {
                    ptrdiff_t cols = n - j0 < BA_NR ? n - j0 : BA_NR;
                    const float *bpanel = bp + (j0 / BA_NR) * kc * BA_NR;
                    for (ptrdiff_t i0 = 0; i0 < mc; i0 += BA_MR) {
                        ptrdiff_t rows = mc - i0 < BA_MR ? mc - i0 : BA_MR;
                        const float *apanel = ap + (i0 / BA_MR) * kc * BA_MR;
                        float *cblk = c + (ic + i0) * ldc + j0;
                        if (rows == BA_MR && cols == BA_NR) {
                            ba_micro(kc, apanel, bpanel, cblk, ldc);
                            continue;
                        }
                        for (int r = 0; r < BA_MR; r++)
                            for (int q = 0; q < BA_NR; q++)
                                tile[r * BA_NR + q] = (r < rows && q < cols) ? cblk[r * ldc + q] : 0.0f;
                        ba_micro(kc, apanel, bpanel, tile, BA_NR);
                        for (ptrdiff_t r = 0; r < rows; r++)
                            for (ptrdiff_t q = 0; q < cols; q++)
                                cblk[r * ldc + q] = tile[r * BA_NR + q];
                    }
                }
            }
        }
        free(bp);
        free(ap);
        return 0;
    }
    """
    float ba_expf(float x) nogil
    float ba_maxf(float a, float b) nogil
    int ba_sgemm(Py_ssize_t m, Py_ssize_t n, Py_ssize_t kk, const float *a, Py_ssize_t lda,
                 const float *b, Py_ssize_t ldb, float *c, Py_ssize_t ldc) nogil


def matmul(const float[:, ::1] a, const float[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], kk = a.shape[1], n = b.shape[1]
    cdef int rc = 0
    if b.shape[0] != kk:
        raise ValueError(
            f"matmul dimension mismatch: ({m}, {kk}) x ({b.shape[0]}, {n})")
    out = np.zeros((m, n), dtype=np.float32)
    if m == 0 or n == 0 or kk == 0:
        return out
    cdef float[:, ::1] c = out
    with nogil:
        rc = ba_sgemm(m, n, kk, &a[0, 0], kk, &b[0, 0], n, &c[0, 0], n)
    if rc:
        raise MemoryError()
    return out


cdef inline void _softmax_span(float *row, Py_ssize_t n, float scale) noexcept nogil:
    # max is order-free; the denominator is summed in eight interleaved lanes
    # folded in a fixed order, so the result is still reproducible
    cdef Py_ssize_t j, l, n8 = n - n % 8
    cdef float mx, total
    cdef float lane[8]
    for j in range(n):
        row[j] = scale * row[j]
    for l in range(8):
        lane[l] = row[0]
    for j in range(0, n8, 8):
        for l in range(8):
            lane[l] = ba_maxf(lane[l], row[j + l])
    mx = lane[0]
    for l in range(1, 8):
        if lane[l] > mx:
            mx = lane[l]
    for j in range(n8, n):
        if row[j] > mx:
            mx = row[j]
    for j in range(n):
        row[j] = ba_expf(row[j] - mx)
    for l in range(8):
        lane[l] = 0.0
    for j in range(0, n8, 8):
        for l in range(8):
            lane[l] = lane[l] + row[j + l]
    total = 0.0
    for l in range(8):
        total = total + lane[l]
    for j in range(n8, n):
        total = total + row[j]
    for j in range(n):
        row[j] = row[j] / total


def softmax_rows(const float[:, ::1] x, float scale):
    cdef Py_ssize_t r = x.shape[0], n = x.shape[1], i
    out = np.array(x, dtype=np.float32, copy=True)
    cdef float[:, ::1] o = out
    if n == 0:
        return out
    with nogil:
        for i in range(r):
            _softmax_span(&o[i, 0], n, scale)
    return out


def rms_norm(const float[:, ::1] x, const float[::1] gain, float eps):
    cdef Py_ssize_t r = x.shape[0], d = x.shape[1], i, j
    if gain.shape[0] != d:
        raise ValueError(f"rms_norm length mismatch: {d} vs gain {gain.shape[0]}")
    out = np.empty((r, d), dtype=np.float32)
    cdef float[:, ::1] o = out
    cdef float ss, inv
    with nogil:
        for i in range(r):
            ss = 0.0
            for j in range(d):
                ss = ss + x[i, j] * x[i, j]
            inv = 1.0 / sqrtf(ss / d + eps)
            for j in range(d):
                o[i, j] = x[i, j] * inv * gain[j]
    return out


def silu(x):
    arr = np.ascontiguousarray(x, dtype=np.float32)
    out = np.empty_like(arr)
    cdef const float[::1] src = arr.reshape(-1)
    cdef float[::1] dst = out.reshape(-1)
    cdef Py_ssize_t i, n = src.shape[0]
    with nogil:
        for i in range(n):
            dst[i] = src[i] / (1.0 + ba_expf(-src[i]))
    return out


def rope_rotate(const float[:, :, ::1] x, const float[:, ::1] cos,
                const float[:, ::1] sin, bint inverse):
    """Rotate adjacent pairs of every head vector; row t uses cos[t], sin[t]."""
    cdef Py_ssize_t n = x.shape[0], heads = x.shape[1], d = x.shape[2]
    cdef Py_ssize_t half = d // 2, t, h, p
    if d % 2:
        raise ValueError(f"rope needs an even head dimension, got {d}")
    if cos.shape[0] != n or cos.shape[1] != half or sin.shape[0] != n or sin.shape[1] != half:
        raise ValueError("rope angle table does not match input")
    out = np.empty((n, heads, d), dtype=np.float32)
    cdef float[:, :, ::1] o = out
    cdef float c, s, x0, x1
    with nogil:
        for t in range(n):
            for h in range(heads):
                for p in range(half):
                    c = cos[t, p]
                    s = sin[t, p]
                    if inverse:
                        s = -s
                    x0 = x[t, h, 2 * p]
                    x1 = x[t, h, 2 * p + 1]
                    o[t, h, 2 * p] = x0 * c - x1 * s
                    o[t, h, 2 * p + 1] = x0 * s + x1 * c
    return out


cdef Py_ssize_t ATTN_TILE = 64


def attention(const float[:, :, ::1] q, const float[:, :, ::1] k,
              const float[:, :, ::1] v, const unsigned char[:, ::1] allowed,
              float scale):
    """Masked grouped-query attention.

    q: [nq, n_heads, d]; k, v: [nk, n_kv_heads, d]; allowed: [nq, nk].
    Forbidden pairs get an additive -1e9 before the softmax. Entries outside a
    row's first..last allowed span would exponentiate to exactly zero, so they
    are skipped. Per KV group, up to 64 query rows of every head sharing that
    group form one score matrix; each score and each output element is still
    a fixed-order sum, so a row's result does not depend on its tile.
    """
    cdef Py_ssize_t nq = q.shape[0], n_heads = q.shape[1], d = q.shape[2]
    cdef Py_ssize_t nk = k.shape[0], n_kv = k.shape[1]
    if k.shape[2] != d or v.shape[0] != nk or v.shape[1] != n_kv or v.shape[2] != d:
        raise ValueError("attention: q/k/v shapes disagree")
    if n_heads % n_kv:
        raise ValueError("attention: n_heads must be a multiple of n_kv_heads")
    if allowed.shape[0] != nq or allowed.shape[1] != nk:
        raise ValueError(
            f"attention mask is {allowed.shape[0]}x{allowed.shape[1]}, expected {nq}x{nk}")
    out = np.zeros((nq, n_heads, d), dtype=np.float32)
    if nq == 0 or nk == 0 or d == 0:
        return out
    cdef float[:, :, ::1] o = out
    cdef Py_ssize_t group = n_heads // n_kv
    cdef Py_ssize_t tile = ATTN_TILE if nq > ATTN_TILE else nq
    cdef Py_ssize_t i0, r, rows, hh, g, j, t, lo, hi, ulo, uhi, span, m, row
    cdef int rc = 0
    cdef float *sc
    cdef float *kt = <float *> malloc(nk * d * sizeof(float))
    cdef float *qt = <float *> malloc(group * tile * d * sizeof(float))
    cdef float *scores = <float *> malloc(group * tile * nk * sizeof(float))
    cdef float *ot = <float *> malloc(group * tile * d * sizeof(float))
    cdef Py_ssize_t *los = <Py_ssize_t *> malloc(nq * sizeof(Py_ssize_t))
    cdef Py_ssize_t *his = <Py_ssize_t *> malloc(nq * sizeof(Py_ssize_t))
    if kt == NULL or qt == NULL or scores == NULL or ot == NULL or los == NULL or his == NULL:
        free(kt); free(qt); free(scores); free(ot); free(los); free(his)
        raise MemoryError()
    try:
        with nogil:
            for i0 in range(nq):
                lo = 0
                while lo < nk and not allowed[i0, lo]:
                    lo += 1
                hi = nk
                while hi > lo and not allowed[i0, hi - 1]:
                    hi -= 1
                los[i0] = lo
                his[i0] = hi
            for g in range(n_kv):
                # dim-major keys: the score product is q_tile [m x d] @ kt [d x nk]
                for j in range(nk):
                    for t in range(d):
                        kt[t * nk + j] = k[j, g, t]
                i0 = 0
                while i0 < nq:
                    rows = nq - i0
                    if rows > tile:
                        rows = tile
                    ulo = nk
                    uhi = 0
                    for r in range(rows):
                        if his[i0 + r] > los[i0 + r]:
                            if los[i0 + r] < ulo:
                                ulo = los[i0 + r]
                            if his[i0 + r] > uhi:
                                uhi = his[i0 + r]
                    if uhi <= ulo:
                        i0 += rows
                        continue
                    span = uhi - ulo
                    m = group * rows
                    for hh in range(group):
                        for r in range(rows):
                            for t in range(d):
                                qt[(hh * rows + r) * d + t] = q[i0 + r, g * group + hh, t]
                    for j in range(m * span):
                        scores[j] = 0.0
                    rc = ba_sgemm(m, span, d, qt, d, kt + ulo, nk, scores, span)
                    if rc:
                        break
                    for hh in range(group):
                        for r in range(rows):
                            row = hh * rows + r
                            sc = scores + row * span
                            lo = los[i0 + r]
                            hi = his[i0 + r]
                            if hi > lo:
                                for j in range(lo, hi):
                                    if not allowed[i0 + r, j]:
                                        sc[j - ulo] = sc[j - ulo] + MASK_PENALTY
                                _softmax_span(sc + lo - ulo, hi - lo, scale)
                                for j in range(ulo, lo):
                                    sc[j - ulo] = 0.0
                                for j in range(hi, uhi):
                                    sc[j - ulo] = 0.0
                            else:
                                for j in range(span):
                                    sc[j] = 0.0
                    for j in range(m * d):
                        ot[j] = 0.0
                    rc = ba_sgemm(m, d, span, scores, span, &v[ulo, g, 0], n_kv * d, ot, d)
                    if rc:
                        break
                    for hh in range(group):
                        for r in range(rows):
                            for t in range(d):
                                o[i0 + r, g * group + hh, t] = ot[(hh * rows + r) * d + t]
                    i0 += rows
                if rc:
                    break
    finally:
        free(kt)
        free(qt)
        free(scores)
        free(ot)
        free(los)
        free(his)
    if rc:
        raise MemoryError()
    return out
