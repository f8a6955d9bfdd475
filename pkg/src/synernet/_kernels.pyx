# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loss kernels. Signatures mirror ``synernet._kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def contrastive_loss(s, double kappa):
    cdef cnp.ndarray[cnp.float64_t, ndim=3] arr = np.ascontiguousarray(s, dtype=np.float64)
    if arr.shape[1] != arr.shape[2]:
        raise ValueError(f"expected (G, N, N) blocks, got shape {tuple(s.shape)}")
    cdef Py_ssize_t g = arr.shape[0], n = arr.shape[1]
    cdef double[:, :, ::1] sv = arr
    out = np.empty((g, n, n), dtype=np.float64)
    cdef double[:, :, ::1] ds = out
    cdef double[::1] row_lse = np.empty(n, dtype=np.float64)
    cdef double[::1] col_lse = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t b, i, j
    cdef double m, acc, z, loss = 0.0, dk = 0.0, dz
    cdef double inv_k = 1.0 / kappa
    cdef double scale = 1.0 / (2.0 * n * g)

    for b in range(g):
        for i in range(n):
            m = sv[b, i, 0] * inv_k
            for j in range(1, n):
                z = sv[b, i, j] * inv_k
                if z > m:
                    m = z
            acc = 0.0
            for j in range(n):
                acc += exp(sv[b, i, j] * inv_k - m)
            row_lse[i] = m + log(acc)
        for j in range(n):
            m = sv[b, 0, j] * inv_k
            for i in range(1, n):
                z = sv[b, i, j] * inv_k
                if z > m:
                    m = z
            acc = 0.0
            for i in range(n):
                acc += exp(sv[b, i, j] * inv_k - m)
            col_lse[j] = m + log(acc)
        for i in range(n):
            loss += row_lse[i] + col_lse[i] - 2.0 * sv[b, i, i] * inv_k
            for j in range(n):
                z = sv[b, i, j] * inv_k
                dz = exp(z - row_lse[i]) + exp(z - col_lse[j])
                if i == j:
                    dz -= 2.0
                dz *= scale
                ds[b, i, j] = dz * inv_k
                dk -= dz * sv[b, i, j]
    return loss * scale, out, dk * inv_k * inv_k


def cross_entropy(logits, labels):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] arr = np.ascontiguousarray(logits, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] lab = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t n = arr.shape[0], c = arr.shape[1]
    if lab.shape[0] != n:
        raise ValueError("labels must be a vector with one entry per row")
    cdef double[:, ::1] lv = arr
    cdef long long[::1] yv = lab
    out = np.empty((n, c), dtype=np.float64)
    cdef double[:, ::1] d = out
    cdef Py_ssize_t i, j
    cdef double m, acc, lse, loss = 0.0
    cdef double inv_n = 1.0 / n if n else 0.0
    for i in range(n):
        if yv[i] < 0 or yv[i] >= c:
            raise ValueError("label out of range")
        m = lv[i, 0]
        for j in range(1, c):
            if lv[i, j] > m:
                m = lv[i, j]
        acc = 0.0
        for j in range(c):
            acc += exp(lv[i, j] - m)
        lse = m + log(acc)
        loss += lse - lv[i, yv[i]]
        for j in range(c):
            d[i, j] = exp(lv[i, j] - lse) * inv_n
        d[i, yv[i]] -= inv_n
    return loss * inv_n, out


def softmax_rows(z):
    arr = np.asarray(z, dtype=np.float64)
    shape = arr.shape
    a2 = np.ascontiguousarray(arr.reshape(-1, shape[len(shape) - 1]))
    out = np.empty(a2.shape, dtype=np.float64)
    _softmax(a2, out)
    return out.reshape(shape)


cdef void _softmax(const double[:, ::1] av, double[:, ::1] o) noexcept:
    cdef Py_ssize_t r = av.shape[0], c = av.shape[1], i, j
    cdef double m, acc
    for i in range(r):
        m = av[i, 0]
        for j in range(1, c):
            if av[i, j] > m:
                m = av[i, j]
        acc = 0.0
        for j in range(c):
            o[i, j] = exp(av[i, j] - m)
            acc += o[i, j]
        for j in range(c):
            o[i, j] /= acc
