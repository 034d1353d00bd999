"""Reference numpy implementations of the integer kernels.

Integer products are accumulated through float64 BLAS: every partial sum is
an integer below 2**53, so the result is exact and matches the compiled
int32 kernels bit for bit.
"""
import numpy as np


def qgemm_acc(a, w, bias):
    acc = a.astype(np.float64) @ w.astype(np.float64).T
    return (acc.astype(np.int64) + bias.astype(np.int64)).astype(np.int32)


def qdepthwise_acc(x, w, bias, stride, ho, wo):
    n, c = x.shape[:2]
    k = w.shape[1]
    acc = np.broadcast_to(bias.astype(np.int32)[None, :, None, None], (n, c, ho, wo)).copy()
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for ky in range(k):
        for kx in range(k):
            tap = w[:, ky, kx].astype(np.int32)[None, :, None, None]
            acc += x[:, :, ky:ky + span_h:stride, kx:kx + span_w:stride].astype(np.int32) * tap
    return acc


def requant(acc, mant, shift, zero_point):
    m = mant.astype(np.int64)[None, :, None]
    s = shift.astype(np.int64)[None, :, None]
    v = ((acc.astype(np.int64) * m + (np.int64(1) << (s - 1))) >> s) + zero_point
    return np.clip(v, -128, 127).astype(np.int8)


def qadd(a, b, ma, mb, shift, zero_point):
    v = a.astype(np.int64) * ma + b.astype(np.int64) * mb
    v = ((v + (np.int64(1) << (shift - 1))) >> shift) + zero_point
    return np.clip(v, -128, 127).astype(np.int8)
