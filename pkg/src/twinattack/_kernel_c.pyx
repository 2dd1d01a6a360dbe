# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twin of _kernel_py: BLAS-backed MLP forward/backward and batch
Mahalanobis scoring with the elementwise work fused into C loops.

Matches the reference backend's semantics; results agree to float rounding
(summation order inside dgemm may differ from numpy's)."""

from libc.math cimport tanh

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

NAME = "compiled"

cnp.import_array()


cdef void _gemm(double[:, ::1] A, double[:, ::1] B, double[:, ::1] C,
                bint trans_a, bint trans_b) noexcept nogil:
    """C = op(A) @ op(B) for row-major buffers via the column-major identity
    C^T = op(B)^T op(A)^T."""
    cdef int m = A.shape[1] if trans_a else A.shape[0]
    cdef int k = A.shape[0] if trans_a else A.shape[1]
    cdef int n = B.shape[0] if trans_b else B.shape[1]
    cdef double one = 1.0, zero = 0.0
    cdef char ta = b'T' if trans_a else b'N'
    cdef char tb = b'T' if trans_b else b'N'
    cdef int lda = A.shape[1], ldb = B.shape[1], ldc = n
    dgemm(&tb, &ta, &n, &m, &k, &one,
          &B[0, 0], &ldb, &A[0, 0], &lda, &zero, &C[0, 0], &ldc)


cdef void _add_bias_tanh(double[:, ::1] Z, double[::1] b, bint activate) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double z
    for i in range(Z.shape[0]):
        for j in range(Z.shape[1]):
            z = Z[i, j] + b[j]
            Z[i, j] = tanh(z) if activate else z


def forward_full(list weights, list biases, X):
    cdef Py_ssize_t i, last = len(weights) - 1
    A = np.ascontiguousarray(X, dtype=np.float64)
    acts = []
    for i in range(len(weights)):
        W = np.ascontiguousarray(weights[i], dtype=np.float64)
        b = np.ascontiguousarray(biases[i], dtype=np.float64)
        Z = np.empty((A.shape[0], W.shape[1]))
        _gemm(A, W, Z, False, False)
        _add_bias_tanh(Z, b, i < last)
        A = Z
        if i < last:
            acts.append(A)
    return A, acts


def forward(list weights, list biases, X):
    return forward_full(weights, biases, X)[0]


cdef void _scale_by_dtanh(double[:, ::1] G, double[:, ::1] act) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(G.shape[0]):
        for j in range(G.shape[1]):
            G[i, j] *= 1.0 - act[i, j] * act[i, j]


def backward(list weights, list biases, X, list acts, dY):
    cdef Py_ssize_t i, r, c
    X = np.ascontiguousarray(X, dtype=np.float64)
    layer_inputs = [X] + acts
    G = np.ascontiguousarray(dY, dtype=np.float64)
    n_layers = len(weights)
    dWs = [None] * n_layers
    dbs = [None] * n_layers
    cdef double[:, ::1] gv
    cdef double[::1] dbv
    for i in range(n_layers - 1, -1, -1):
        W = np.ascontiguousarray(weights[i], dtype=np.float64)
        A_in = np.ascontiguousarray(layer_inputs[i], dtype=np.float64)
        dW = np.empty((A_in.shape[1], G.shape[1]))
        _gemm(A_in, G, dW, True, False)
        db = np.zeros(G.shape[1])
        gv = G
        dbv = db
        with nogil:
            for r in range(gv.shape[0]):
                for c in range(gv.shape[1]):
                    dbv[c] += gv[r, c]
        dWs[i] = dW
        dbs[i] = db
        G_prev = np.empty((G.shape[0], W.shape[0]))
        _gemm(G, W, G_prev, False, True)
        G = G_prev
        if i > 0:
            _scale_by_dtanh(G, np.ascontiguousarray(acts[i - 1], dtype=np.float64))
    return dWs, dbs, G


def mahalanobis_sq(R, mu, sigma_inv):
    R = np.ascontiguousarray(R, dtype=np.float64)
    mu = np.ascontiguousarray(mu, dtype=np.float64)
    S = np.ascontiguousarray(sigma_inv, dtype=np.float64)
    cdef double[:, ::1] rv = R
    cdef double[::1] mv = mu
    cdef double[:, ::1] sv = S
    cdef Py_ssize_t n = R.shape[0], d = R.shape[1]
    out = np.empty(n)
    cdef double[::1] ov = out
    cdef Py_ssize_t b, i, j
    cdef double acc, row
    with nogil:
        for b in range(n):
            acc = 0.0
            for i in range(d):
                row = 0.0
                for j in range(d):
                    row += sv[i, j] * (rv[b, j] - mv[j])
                acc += (rv[b, i] - mv[i]) * row
            ov[b] = acc
    return out
