# cython: language_level=3
"""Compiled hot loops: low-bit code packing, dequantizing GEMV, Jacobi eigh.

Bit layout: code ``i`` occupies bits ``[b*i, b*i + b)`` of the little-endian
concatenation of the 32-bit words (LSB first). 3-bit codes may straddle a
word boundary.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def pack_codes(const cnp.uint8_t[::1] codes, int bits):
    cdef Py_ssize_t n = codes.shape[0]
    cdef Py_ssize_t n_words = (n * bits + 31) // 32
    out = np.zeros(n_words, dtype=np.uint32)
    cdef cnp.uint32_t[::1] words = out
    cdef Py_ssize_t i, pos, w
    cdef int off
    cdef cnp.uint32_t c
    for i in range(n):
        c = codes[i]
        pos = i * bits
        w = pos >> 5
        off = pos & 31
        words[w] |= c << off
        if off + bits > 32:
            words[w + 1] |= c >> (32 - off)
    return out


cdef inline cnp.uint32_t _extract(const cnp.uint32_t[::1] words, Py_ssize_t pos,
                                  int bits, cnp.uint32_t mask) nogil:
    cdef Py_ssize_t w = pos >> 5
    cdef int off = pos & 31
    cdef cnp.uint32_t v = words[w] >> off
    if off + bits > 32:
        v |= words[w + 1] << (32 - off)
    return v & mask


def unpack_codes(const cnp.uint32_t[::1] words, int bits, Py_ssize_t count):
    out = np.empty(count, dtype=np.uint8)
    cdef cnp.uint8_t[::1] codes = out
    cdef cnp.uint32_t mask = (<cnp.uint32_t>1 << bits) - 1
    cdef Py_ssize_t i
    with nogil:
        for i in range(count):
            codes[i] = <cnp.uint8_t>_extract(words, i * bits, bits, mask)
    return out


def packed_gemv(const cnp.uint32_t[::1] words,
                const double[:, ::1] scales,
                const double[:, ::1] zeros,
                const double[::1] x,
                Py_ssize_t out_features,
                Py_ssize_t in_features,
                Py_ssize_t group_size,
                int bits,
                Py_ssize_t tile):
    out = np.zeros(out_features, dtype=np.float64)
    cdef double[::1] y = out
    cdef cnp.uint32_t mask = (<cnp.uint32_t>1 << bits) - 1
    cdef Py_ssize_t r, t0, c0, j, g, pos
    cdef double acc, part, s, z
    with nogil:
        for r in range(out_features):
            acc = 0.0
            t0 = 0
            while t0 < in_features:
                part = 0.0
                c0 = t0
                while c0 < t0 + tile:
                    # group boundaries align with 32-element chunks
                    g = c0 // group_size
                    s = scales[r, g]
                    z = zeros[r, g]
                    pos = (r * in_features + c0) * bits
                    for j in range(32):
                        part += s * (<double>_extract(words, pos + j * bits, bits, mask) - z) * x[c0 + j]
                    c0 += 32
                acc += part
                t0 += tile
            y[r] = acc
    return out


def jacobi_eigh(A, double tol=1e-15, int max_sweeps=100):
    """Cyclic Jacobi on a symmetric matrix; eigenvalues descending."""
    a_np = np.array(A, dtype=np.float64, order="C", copy=True)
    cdef Py_ssize_t n = a_np.shape[0]
    v_np = np.eye(n, dtype=np.float64)
    cdef double[:, ::1] a = a_np
    cdef double[:, ::1] v = v_np
    cdef Py_ssize_t p, q, k, sweep
    cdef double fro = 0.0, off, apq, tau, t, c, s, akp, akq
    for p in range(n):
        for q in range(n):
            fro += a[p, q] * a[p, q]
    fro = sqrt(fro)
    with nogil:
        for sweep in range(max_sweeps):
            off = 0.0
            for p in range(n - 1):
                for q in range(p + 1, n):
                    off += a[p, q] * a[p, q]
            if sqrt(2.0 * off) <= tol * fro or off == 0.0:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if apq == 0.0:
                        continue
                    tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                    if tau >= 0:
                        t = 1.0 / (tau + sqrt(1.0 + tau * tau))
                    else:
                        t = -1.0 / (-tau + sqrt(1.0 + tau * tau))
                    c = 1.0 / sqrt(1.0 + t * t)
                    s = t * c
                    for k in range(n):
                        akp = a[k, p]
                        akq = a[k, q]
                        a[k, p] = c * akp - s * akq
                        a[k, q] = s * akp + c * akq
                    for k in range(n):
                        akp = a[p, k]
                        akq = a[q, k]
                        a[p, k] = c * akp - s * akq
                        a[q, k] = s * akp + c * akq
                    for k in range(n):
                        akp = v[k, p]
                        akq = v[k, q]
                        v[k, p] = c * akp - s * akq
                        v[k, q] = s * akp + c * akq
    w = np.diagonal(a_np).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v_np[:, order]
