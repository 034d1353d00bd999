# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled integer kernels for the INT8 execution path.

Semantics are defined by the numpy fallback in ``_pykernels``; both must
produce bit-identical results.
"""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int8_t, int16_t, int32_t, int64_t

cnp.import_array()


def qgemm_acc(const int16_t[:, ::1] a, const int8_t[:, ::1] w, const int32_t[::1] bias):
    """acc[m, o] = bias[o] + sum_k a[m, k] * w[o, k] in int32."""
    cdef Py_ssize_t M = a.shape[0], K = a.shape[1], O = w.shape[0]
    cdef Py_ssize_t m, o, k
    cdef int32_t acc
    cdef const int16_t* arow
    cdef const int8_t* wrow
    out_arr = np.empty((M, O), dtype=np.int32)
    cdef int32_t[:, ::1] out = out_arr
    with nogil:
        for m in range(M):
            arow = &a[m, 0]
            for o in range(O):
                wrow = &w[o, 0]
                acc = bias[o]
                for k in range(K):
                    acc = acc + <int32_t>arow[k] * <int32_t>wrow[k]
                out[m, o] = acc
    return out_arr


def qdepthwise_acc(const int16_t[:, :, :, ::1] x, const int8_t[:, :, ::1] w,
                   const int32_t[::1] bias, int stride, int ho, int wo):
    """Depthwise correlation over a zero-point-corrected, already padded input."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], K = w.shape[1]
    cdef Py_ssize_t n, c, i, j, ky, kx
    cdef int32_t acc
    out_arr = np.empty((N, C, ho, wo), dtype=np.int32)
    cdef int32_t[:, :, :, ::1] out = out_arr
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(ho):
                    for j in range(wo):
                        acc = bias[c]
                        for ky in range(K):
                            for kx in range(K):
                                acc = acc + <int32_t>x[n, c, i * stride + ky, j * stride + kx] * \
                                    <int32_t>w[c, ky, kx]
                        out[n, c, i, j] = acc
    return out_arr


def requant(const int32_t[:, :, ::1] acc, const int64_t[::1] mant, const int64_t[::1] shift,
            int zero_point):
    """int8 out[n, c, l] = clamp(((acc * mant[c] + 2^(shift[c]-1)) >> shift[c]) + zp)."""
    cdef Py_ssize_t N = acc.shape[0], C = acc.shape[1], L = acc.shape[2]
    cdef Py_ssize_t n, c, l
    cdef int64_t mc, rnd, v
    cdef int sc
    out_arr = np.empty((N, C, L), dtype=np.int8)
    cdef int8_t[:, :, ::1] out = out_arr
    with nogil:
        for c in range(C):
            mc = mant[c]
            sc = <int>shift[c]
            rnd = (<int64_t>1) << (sc - 1)
            for n in range(N):
                for l in range(L):
                    v = (((<int64_t>acc[n, c, l]) * mc + rnd) >> sc) + zero_point
                    if v < -128:
                        v = -128
                    elif v > 127:
                        v = 127
                    out[n, c, l] = <int8_t>v
    return out_arr


def qadd(const int16_t[::1] a, const int16_t[::1] b, int64_t ma, int64_t mb, int shift,
         int zero_point):
    """int8 out = clamp(((a*ma + b*mb + 2^(shift-1)) >> shift) + zp) over flat arrays."""
    cdef Py_ssize_t n = a.shape[0], i
    cdef int64_t rnd = (<int64_t>1) << (shift - 1), v
    out_arr = np.empty(n, dtype=np.int8)
    cdef int8_t[::1] out = out_arr
    with nogil:
        for i in range(n):
            v = ((<int64_t>a[i] * ma + <int64_t>b[i] * mb + rnd) >> shift) + zero_point
            if v < -128:
                v = -128
            elif v > 127:
                v = 127
            out[i] = <int8_t>v
    return out_arr
