"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures and bit layout; selected by ``laqlab.kernels`` when the
extension is unavailable or ``LAQLAB_PURE_PYTHON=1``.
"""
import numpy as np


def pack_codes(codes, bits):
    codes = np.asarray(codes, dtype=np.uint8)
    n_words = (codes.size * bits + 31) // 32
    bitstream = np.zeros(n_words * 32, dtype=np.uint64)
    bitstream[: codes.size * bits] = ((codes[:, None] >> np.arange(bits)) & 1).ravel()
    weights = np.uint64(1) << np.arange(32, dtype=np.uint64)
    return (bitstream.reshape(n_words, 32) * weights).sum(axis=1).astype(np.uint32)


def unpack_codes(words, bits, count):
    words = np.asarray(words, dtype=np.uint32)
    bitstream = ((words[:, None] >> np.arange(32, dtype=np.uint32)) & 1).ravel()
    bitstream = bitstream[: count * bits].reshape(count, bits).astype(np.uint8)
    return (bitstream << np.arange(bits, dtype=np.uint8)).sum(axis=1).astype(np.uint8)


def packed_gemv(words, scales, zeros, x, out_features, in_features, group_size, bits, tile):
    codes = unpack_codes(words, bits, out_features * in_features).reshape(out_features, in_features)
    s = np.repeat(scales, group_size, axis=1)
    z = np.repeat(zeros, group_size, axis=1)
    w = s * (codes.astype(np.float64) - z)
    y = np.zeros(out_features)
    for t0 in range(0, in_features, tile):
        y += w[:, t0 : t0 + tile] @ x[t0 : t0 + tile]
    return y


def jacobi_eigh(A, tol=1e-15, max_sweeps=100):
    """Cyclic Jacobi on a symmetric matrix; eigenvalues descending."""
    a = np.array(A, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    fro = np.sqrt((a * a).sum())
    iu = np.triu_indices(n, 1)
    for _ in range(max_sweeps):
        off = (a[iu] ** 2).sum()
        if off == 0.0 or np.sqrt(2.0 * off) <= tol * fro:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diagonal(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]
