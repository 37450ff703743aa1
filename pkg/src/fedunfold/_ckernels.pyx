# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled MLP kernels; see _pykernels for the contract."""

import numpy as np
from libc.math cimport exp, log
from libc.stdlib cimport malloc, free
from scipy.linalg.cython_blas cimport dgemm


# Arrays are row-major; BLAS is column-major, so every product is issued
# transposed: row-major C = A @ B is column-major C^T = B^T @ A^T.
cdef inline void _gemm(char ta, char tb, int m, int n, int k, const double* a, int lda,
                       const double* b, int ldb, double beta, double* c, int ldc) noexcept nogil:
    cdef double one = 1.0
    dgemm(&ta, &tb, &m, &n, &k, &one, <double*> a, &lda, <double*> b, &ldb, &beta, c, &ldc)


cdef double _batch_grad(
    const double* theta, const long* sizes, int L,
    const double* X, const double* Y, int p, int c,
    const long* idx, int B, int loss_kind,
    double* acts, const long* act_off,
    double* delta, double* delta_prev,
    double* grad,
) noexcept nogil:
    # acts holds the gathered inputs (layer 0) and every post-activation
    cdef int l, i, j, b, n_in, n_out
    cdef long wpos, bpos, row
    cdef double s, m, z, loss = 0.0
    cdef double* A
    cdef double* Anext
    cdef double* tmp

    A = acts
    for b in range(B):
        row = idx[b]
        for i in range(p):
            A[b * p + i] = X[row * p + i]

    wpos = 0
    for l in range(L):
        n_in = sizes[l]
        n_out = sizes[l + 1]
        bpos = wpos + n_in * n_out
        A = acts + act_off[l]
        Anext = acts + act_off[l + 1]
        for b in range(B):
            for j in range(n_out):
                Anext[b * n_out + j] = theta[bpos + j]
        # Anext += A @ W
        _gemm(b'N', b'N', n_out, B, n_in, theta + wpos, n_out, A, n_in, 1.0, Anext, n_out)
        for b in range(B):
            if l < L - 1:
                for j in range(n_out):
                    if Anext[b * n_out + j] < 0.0:
                        Anext[b * n_out + j] = 0.0
        wpos = bpos + n_out

    # output residual -> delta
    A = acts + act_off[L]
    if loss_kind == 0:
        for b in range(B):
            row = idx[b]
            for j in range(c):
                z = A[b * c + j] - Y[row * c + j]
                loss += z * z
                delta[b * c + j] = 2.0 * z / (B * c)
        loss /= B * c
    else:
        for b in range(B):
            row = idx[b]
            m = A[b * c]
            for j in range(1, c):
                if A[b * c + j] > m:
                    m = A[b * c + j]
            s = 0.0
            for j in range(c):
                s += exp(A[b * c + j] - m)
            for j in range(c):
                z = A[b * c + j] - m - log(s)
                loss -= Y[row * c + j] * z
                delta[b * c + j] = (exp(z) - Y[row * c + j]) / B
        loss /= B

    # backprop; wpos currently points one past the last bias
    for l in range(L - 1, -1, -1):
        n_in = sizes[l]
        n_out = sizes[l + 1]
        bpos = wpos - n_out
        wpos = bpos - n_in * n_out
        A = acts + act_off[l]
        for j in range(n_out):
            grad[bpos + j] = 0.0
        for b in range(B):
            for j in range(n_out):
                grad[bpos + j] += delta[b * n_out + j]
        # gW = A^T @ delta
        _gemm(b'N', b'T', n_out, n_in, B, delta, n_out, A, n_in, 0.0, grad + wpos, n_out)
        if l > 0:
            # delta_prev = (delta @ W^T) * relu'(pre-activation)
            _gemm(b'T', b'N', n_in, B, n_out, theta + wpos, n_out, delta, n_out, 0.0, delta_prev, n_in)
            for b in range(B):
                for i in range(n_in):
                    if A[b * n_in + i] <= 0.0:
                        delta_prev[b * n_in + i] = 0.0
            tmp = delta
            delta = delta_prev
            delta_prev = tmp
    return loss


cdef class _Workspace:
    cdef double* acts
    cdef double* d0
    cdef double* d1
    cdef long* act_off

    def __cinit__(self, long[::1] sizes, int B):
        cdef int L = sizes.shape[0] - 1
        cdef int l
        cdef long width = 0, total = 0
        self.act_off = <long*> malloc((L + 1) * sizeof(long))
        for l in range(L + 1):
            self.act_off[l] = total
            total += B * sizes[l]
            if sizes[l] > width:
                width = sizes[l]
        self.acts = <double*> malloc(max(total, 1) * sizeof(double))
        self.d0 = <double*> malloc(max(B * width, 1) * sizeof(double))
        self.d1 = <double*> malloc(max(B * width, 1) * sizeof(double))
        if not (self.act_off and self.acts and self.d0 and self.d1):
            raise MemoryError()

    def __dealloc__(self):
        free(self.acts)
        free(self.d0)
        free(self.d1)
        free(self.act_off)


def _as_sizes(sizes):
    return np.ascontiguousarray(sizes, dtype=np.int64)


def loss_grad(theta, sizes, X, Y, loss_kind):
    cdef long[::1] sz = _as_sizes(sizes)
    cdef double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[:, ::1] Yv = np.ascontiguousarray(Y, dtype=np.float64)
    cdef int B = Xv.shape[0]
    cdef int L = sz.shape[0] - 1
    cdef long[::1] idx = np.arange(B, dtype=np.int64)
    grad_arr = np.empty(th.shape[0], dtype=np.float64)
    cdef double[::1] g = grad_arr
    cdef _Workspace ws = _Workspace(sz, B)
    cdef int kind = loss_kind
    cdef double loss
    with nogil:
        loss = _batch_grad(&th[0], &sz[0], L, &Xv[0, 0], &Yv[0, 0], Xv.shape[1], Yv.shape[1],
                           &idx[0], B, kind, ws.acts, ws.act_off, ws.d0, ws.d1, &g[0])
    return loss, grad_arr


def sgd_steps(theta, sizes, X, Y, order, batch_ptr, scales, loss_kind):
    cdef long[::1] sz = _as_sizes(sizes)
    w_arr = np.array(theta, dtype=np.float64)
    cdef double[::1] w = w_arr
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[:, ::1] Yv = np.ascontiguousarray(Y, dtype=np.float64)
    cdef long[::1] ordv = np.ascontiguousarray(order, dtype=np.int64)
    cdef long[::1] ptr = np.ascontiguousarray(batch_ptr, dtype=np.int64)
    cdef double[::1] sc = np.ascontiguousarray(scales, dtype=np.float64)
    cdef int nsteps = sc.shape[0]
    cdef int L = sz.shape[0] - 1
    cdef int d = w.shape[0]
    cdef int s, i, B, Bmax = 1
    cdef int kind = loss_kind
    for s in range(nsteps):
        if ptr[s + 1] - ptr[s] > Bmax:
            Bmax = ptr[s + 1] - ptr[s]
    if nsteps == 0:
        return w_arr
    cdef _Workspace ws = _Workspace(sz, Bmax)
    g_arr = np.empty(d, dtype=np.float64)
    cdef double[::1] g = g_arr
    with nogil:
        for s in range(nsteps):
            B = ptr[s + 1] - ptr[s]
            if B <= 0:
                continue
            _batch_grad(&w[0], &sz[0], L, &Xv[0, 0], &Yv[0, 0], Xv.shape[1], Yv.shape[1],
                        &ordv[ptr[s]], B, kind, ws.acts, ws.act_off, ws.d0, ws.d1, &g[0])
            for i in range(d):
                w[i] -= sc[s] * g[i]
    return w_arr
