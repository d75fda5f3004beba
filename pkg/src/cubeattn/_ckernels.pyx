# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled block-sparse attention kernels.

Same contract as ``cubeattn._pykernels``: for each query block the visible
key ranges are gathered into a contiguous tile, scores and the weighted sum
go through BLAS gemm, and the softmax runs in C. The whole loop holds no
Python objects, so per-block dispatch costs nothing. ``visits`` counts the
(query, key) pairs whose score was evaluated.
"""
import numpy as np

from cython cimport floating
from libc.math cimport exp, expf, log
from libc.stdlib cimport free, malloc
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemm, sgemm

NAME = "cython"


cdef inline floating _exp(floating x) noexcept nogil:
    if floating is float:
        return expf(x)
    else:
        return exp(x)


cdef inline void _gemm_rm(char ta, char tb, int m, int n, int k, floating alpha,
                          floating *a, int lda, floating *b, int ldb, floating beta,
                          floating *c, int ldc) noexcept nogil:
    # row-major C = op(A) op(B), computed as column-major C^T = op(B)^T op(A)^T
    if floating is double:
        dgemm(&tb, &ta, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)
    else:
        sgemm(&tb, &ta, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


cdef Py_ssize_t _gather(floating *dst, floating *src, Py_ssize_t width,
                        const long long[:] kr_start, const long long[:] kr_len,
                        Py_ssize_t lo, Py_ssize_t hi) noexcept nogil:
    cdef Py_ssize_t r, n = 0
    for r in range(lo, hi):
        memcpy(dst + n * width, src + kr_start[r] * width, kr_len[r] * width * sizeof(floating))
        n += kr_len[r]
    return n


cdef void _scatter_add(floating *dst, floating *src, Py_ssize_t width,
                       const long long[:] kr_start, const long long[:] kr_len,
                       Py_ssize_t lo, Py_ssize_t hi) noexcept nogil:
    cdef Py_ssize_t r, j, c, n = 0
    cdef floating *row
    for r in range(lo, hi):
        for j in range(kr_len[r]):
            row = dst + (kr_start[r] + j) * width
            for c in range(width):
                row[c] += src[n * width + c]
            n += 1


cdef void _block_sizes(const long long[:] q_len, const long long[:] kr_ptr,
                       const long long[:] kr_len, Py_ssize_t *max_q, Py_ssize_t *max_k) noexcept nogil:
    cdef Py_ssize_t b, j, n
    max_q[0] = 0
    max_k[0] = 0
    for b in range(q_len.shape[0]):
        n = 0
        for j in range(kr_ptr[b], kr_ptr[b + 1]):
            n += kr_len[j]
        if n > max_k[0]:
            max_k[0] = n
        if q_len[b] > max_q[0]:
            max_q[0] = q_len[b]


def sparse_forward(floating[:, :, ::1] q, floating[:, :, ::1] k, floating[:, :, ::1] v,
                   const long long[:] q_start, const long long[:] q_len,
                   const long long[:] kr_ptr, const long long[:] kr_start,
                   const long long[:] kr_len, double scale):
    cdef Py_ssize_t heads = q.shape[0], n_q = q.shape[1], d = q.shape[2], dv = v.shape[2]
    cdef Py_ssize_t n_k = k.shape[1]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((heads, n_q, dv), dtype=dtype)
    lse_arr = np.zeros((heads, n_q), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef floating[:, ::1] lse = lse_arr
    cdef Py_ssize_t b
    for b in range(q_start.shape[0]):
        if kr_ptr[b + 1] == kr_ptr[b]:
            raise ValueError(f"query block {b} has no visible keys")
    if heads == 0 or n_q == 0:
        return out_arr, lse_arr, 0
    cdef Py_ssize_t max_q, max_k
    _block_sizes(q_len, kr_ptr, kr_len, &max_q, &max_k)
    cdef floating *kt = <floating *> malloc((max_k * d + 1) * sizeof(floating))
    cdef floating *vt = <floating *> malloc((max_k * dv + 1) * sizeof(floating))
    cdef floating *s = <floating *> malloc((max_q * max_k + 1) * sizeof(floating))
    if kt == NULL or vt == NULL or s == NULL:
        free(kt); free(vt); free(s)
        raise MemoryError()
    cdef long long visits = 0
    cdef Py_ssize_t h, i, j, qs, ql, nk
    cdef double m, denom
    cdef floating *row
    try:
        with nogil:
            for h in range(heads):
                for b in range(q_start.shape[0]):
                    qs = q_start[b]
                    ql = q_len[b]
                    nk = _gather(kt, &k[h, 0, 0], d, kr_start, kr_len, kr_ptr[b], kr_ptr[b + 1])
                    _gather(vt, &v[h, 0, 0], dv, kr_start, kr_len, kr_ptr[b], kr_ptr[b + 1])
                    _gemm_rm(c'N', c'T', ql, nk, d, <floating> scale, &q[h, qs, 0], d, kt, d,
                             <floating> 0.0, s, nk)
                    visits += ql * nk
                    for i in range(ql):
                        row = s + i * nk
                        m = row[0]
                        for j in range(1, nk):
                            if row[j] > m:
                                m = row[j]
                        denom = 0.0
                        for j in range(nk):
                            row[j] = _exp(row[j] - <floating> m)
                            denom += row[j]
                        for j in range(nk):
                            row[j] = <floating> (row[j] / denom)
                        lse[h, qs + i] = <floating> (m + log(denom))
                    _gemm_rm(c'N', c'N', ql, dv, nk, <floating> 1.0, s, nk, vt, dv,
                             <floating> 0.0, &out[h, qs, 0], dv)
    finally:
        free(kt); free(vt); free(s)
    return out_arr, lse_arr, int(visits)


def sparse_backward(floating[:, :, ::1] q, floating[:, :, ::1] k, floating[:, :, ::1] v,
                    floating[:, :, ::1] out, floating[:, ::1] lse, floating[:, :, ::1] dout,
                    const long long[:] q_start, const long long[:] q_len,
                    const long long[:] kr_ptr, const long long[:] kr_start,
                    const long long[:] kr_len, double scale):
    cdef Py_ssize_t heads = q.shape[0], n_q = q.shape[1], d = q.shape[2], dv = v.shape[2]
    dtype = np.float32 if floating is float else np.float64
    dq_arr = np.zeros((heads, n_q, d), dtype=dtype)
    dk_arr = np.zeros((heads, k.shape[1], d), dtype=dtype)
    dv_arr = np.zeros((heads, v.shape[1], dv), dtype=dtype)
    cdef floating[:, :, ::1] dq = dq_arr
    cdef floating[:, :, ::1] dk = dk_arr
    cdef floating[:, :, ::1] dvv = dv_arr
    if heads == 0 or n_q == 0:
        return dq_arr, dk_arr, dv_arr
    cdef Py_ssize_t max_q, max_k
    _block_sizes(q_len, kr_ptr, kr_len, &max_q, &max_k)
    cdef Py_ssize_t width = d if d > dv else dv
    cdef floating *kt = <floating *> malloc((max_k * d + 1) * sizeof(floating))
    cdef floating *vt = <floating *> malloc((max_k * dv + 1) * sizeof(floating))
    cdef floating *gt = <floating *> malloc((max_k * width + 1) * sizeof(floating))
    cdef floating *p = <floating *> malloc((max_q * max_k + 1) * sizeof(floating))
    cdef floating *dp = <floating *> malloc((max_q * max_k + 1) * sizeof(floating))
    if kt == NULL or vt == NULL or gt == NULL or p == NULL or dp == NULL:
        free(kt); free(vt); free(gt); free(p); free(dp)
        raise MemoryError()
    cdef Py_ssize_t h, b, i, j, c, qs, ql, nk
    cdef double delta, li
    try:
        with nogil:
            for h in range(heads):
                for b in range(q_start.shape[0]):
                    qs = q_start[b]
                    ql = q_len[b]
                    nk = _gather(kt, &k[h, 0, 0], d, kr_start, kr_len, kr_ptr[b], kr_ptr[b + 1])
                    _gather(vt, &v[h, 0, 0], dv, kr_start, kr_len, kr_ptr[b], kr_ptr[b + 1])
                    _gemm_rm(c'N', c'T', ql, nk, d, <floating> scale, &q[h, qs, 0], d, kt, d,
                             <floating> 0.0, p, nk)
                    for i in range(ql):
                        li = lse[h, qs + i]
                        for j in range(nk):
                            p[i * nk + j] = _exp(p[i * nk + j] - <floating> li)
                    # dV tile = P^T dO
                    _gemm_rm(c'T', c'N', nk, dv, ql, <floating> 1.0, p, nk, &dout[h, qs, 0], dv,
                             <floating> 0.0, gt, dv)
                    _scatter_add(&dvv[h, 0, 0], gt, dv, kr_start, kr_len, kr_ptr[b], kr_ptr[b + 1])
                    # dP = dO V^T
                    _gemm_rm(c'N', c'T', ql, nk, dv, <floating> 1.0, &dout[h, qs, 0], dv, vt, dv,
                             <floating> 0.0, dp, nk)
                    for i in range(ql):
                        delta = 0.0
                        for c in range(dv):
                            delta += dout[h, qs + i, c] * out[h, qs + i, c]
                        for j in range(nk):
                            dp[i * nk + j] = <floating> (p[i * nk + j] * (dp[i * nk + j] - delta) * scale)
                    # dQ rows of this block are written once; dK tile is scattered
                    _gemm_rm(c'N', c'N', ql, d, nk, <floating> 1.0, dp, nk, kt, d,
                             <floating> 0.0, &dq[h, qs, 0], d)
                    _gemm_rm(c'T', c'N', nk, d, ql, <floating> 1.0, dp, nk, &q[h, qs, 0], d,
                             <floating> 0.0, gt, d)
                    _scatter_add(&dk[h, 0, 0], gt, d, kr_start, kr_len, kr_ptr[b], kr_ptr[b + 1])
    finally:
        free(kt); free(vt); free(gt); free(p); free(dp)
    return dq_arr, dk_arr, dv_arr
