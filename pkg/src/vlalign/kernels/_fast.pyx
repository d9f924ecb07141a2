# Compiled kernel backend; mirrors vlalign.kernels.pure exactly.
# Same update order and comparison logic as the pure module so the two
# backends agree to rounding (and bit-for-bit for lap_min).

import numpy as np

cimport numpy as cnp
from libc.math cimport tanh, exp, sqrt, INFINITY

cnp.import_array()

BACKEND = "compiled"

ctypedef fused floatT:
    float
    double

DEF GELU_C = 0.7978845608028654
DEF GELU_A = 0.044715


def gelu_fwd(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    _gelu_fwd(x.ravel(), out.ravel())
    return out


def _gelu_fwd(floatT[::1] x, floatT[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double xi, u
    for i in range(n):
        xi = x[i]
        u = GELU_C * (xi + GELU_A * xi * xi * xi)
        out[i] = <floatT> (0.5 * xi * (1.0 + tanh(u)))


def gelu_bwd(x, gy):
    x = np.ascontiguousarray(x)
    gy = np.ascontiguousarray(gy)
    out = np.empty_like(x)
    _gelu_bwd(x.ravel(), gy.ravel(), out.ravel())
    return out


def _gelu_bwd(floatT[::1] x, floatT[::1] gy, floatT[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double xi, u, t, du
    for i in range(n):
        xi = x[i]
        u = GELU_C * (xi + GELU_A * xi * xi * xi)
        t = tanh(u)
        du = GELU_C * (1.0 + 3.0 * GELU_A * xi * xi)
        out[i] = <floatT> (gy[i] * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du))


def layernorm_fwd(x, double eps):
    x = np.ascontiguousarray(x)
    xhat = np.empty_like(x)
    mean = np.empty(x.shape[0], dtype=x.dtype)
    rstd = np.empty(x.shape[0], dtype=x.dtype)
    _layernorm_fwd(x, xhat, mean, rstd, eps)
    return xhat, mean, rstd


def _layernorm_fwd(floatT[:, ::1] x, floatT[:, ::1] xhat,
                         floatT[::1] mean, floatT[::1] rstd, double eps):
    cdef Py_ssize_t i, j, rows = x.shape[0], cols = x.shape[1]
    cdef double s, mu, var, r, d
    for i in range(rows):
        s = 0.0
        for j in range(cols):
            s += x[i, j]
        mu = s / cols
        var = 0.0
        for j in range(cols):
            d = x[i, j] - mu
            var += d * d
        var /= cols
        r = 1.0 / sqrt(var + eps)
        mean[i] = <floatT> mu
        rstd[i] = <floatT> r
        for j in range(cols):
            xhat[i, j] = <floatT> ((x[i, j] - mu) * r)


def layernorm_bwd(dxhat, xhat, rstd):
    dxhat = np.ascontiguousarray(dxhat)
    xhat = np.ascontiguousarray(xhat)
    rstd = np.ascontiguousarray(rstd)
    dx = np.empty_like(dxhat)
    _layernorm_bwd(dxhat, xhat, rstd, dx)
    return dx


def _layernorm_bwd(floatT[:, ::1] dxhat, floatT[:, ::1] xhat,
                         floatT[::1] rstd, floatT[:, ::1] dx):
    cdef Py_ssize_t i, j, rows = dxhat.shape[0], cols = dxhat.shape[1]
    cdef double m1, m2
    for i in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(cols):
            m1 += dxhat[i, j]
            m2 += dxhat[i, j] * xhat[i, j]
        m1 /= cols
        m2 /= cols
        for j in range(cols):
            dx[i, j] = <floatT> (rstd[i] * (dxhat[i, j] - m1 - xhat[i, j] * m2))


def softmax_fwd(x):
    x = np.ascontiguousarray(x)
    p = np.empty_like(x)
    _softmax_fwd(x, p)
    return p


def _softmax_fwd(floatT[:, ::1] x, floatT[:, ::1] p):
    cdef Py_ssize_t i, j, rows = x.shape[0], cols = x.shape[1]
    cdef double mx, s, e
    for i in range(rows):
        mx = x[i, 0]
        for j in range(1, cols):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(cols):
            e = exp(x[i, j] - mx)
            p[i, j] = <floatT> e
            s += e
        for j in range(cols):
            p[i, j] = <floatT> (p[i, j] / s)


def softmax_bwd(p, gy):
    p = np.ascontiguousarray(p)
    gy = np.ascontiguousarray(gy)
    gx = np.empty_like(p)
    _softmax_bwd(p, gy, gx)
    return gx


def _softmax_bwd(floatT[:, ::1] p, floatT[:, ::1] gy, floatT[:, ::1] gx):
    cdef Py_ssize_t i, j, rows = p.shape[0], cols = p.shape[1]
    cdef double dot
    for i in range(rows):
        dot = 0.0
        for j in range(cols):
            dot += p[i, j] * gy[i, j]
        for j in range(cols):
            gx[i, j] = <floatT> (p[i, j] * (gy[i, j] - dot))


def adamw_update(p, g, m, v, step, double lr, double beta1, double beta2,
                 double eps, double weight_decay):
    _adamw_update(p.ravel(), np.ascontiguousarray(g).ravel(), m.ravel(),
                  v.ravel(), <long> step, lr, beta1, beta2, eps, weight_decay)


def _adamw_update(floatT[::1] p, floatT[::1] g, floatT[::1] m,
                        floatT[::1] v, long step, double lr, double beta1,
                        double beta2, double eps, double weight_decay):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double bc1 = 1.0 - beta1 ** step
    cdef double bc2 = 1.0 - beta2 ** step
    cdef double gi
    for i in range(n):
        if weight_decay != 0.0:
            p[i] = <floatT> (p[i] * (1.0 - lr * weight_decay))
        gi = g[i]
        m[i] = <floatT> (m[i] * beta1 + (1.0 - beta1) * gi)
        v[i] = <floatT> (v[i] * beta2 + (1.0 - beta2) * gi * gi)
        p[i] = <floatT> (p[i] - (lr / bc1) * m[i] / (sqrt(v[i] / bc2) + eps))


def lap_min(cost):
    cdef Py_ssize_t n = cost.shape[0]
    a = np.zeros((n + 1, n + 1), dtype=np.float64)
    a[1:, 1:] = cost
    col_of_row = np.zeros(n, dtype=np.int64)
    _lap_min(a, col_of_row, n)
    return col_of_row


cdef void _lap_min(double[:, ::1] a, long[::1] col_of_row, Py_ssize_t n):
    cdef cnp.ndarray[double, ndim=1] u = np.zeros(n + 1)
    cdef cnp.ndarray[double, ndim=1] v = np.zeros(n + 1)
    cdef cnp.ndarray[long, ndim=1] p = np.zeros(n + 1, dtype=np.int64)
    cdef cnp.ndarray[long, ndim=1] way = np.zeros(n + 1, dtype=np.int64)
    cdef cnp.ndarray[double, ndim=1] minv = np.empty(n + 1)
    cdef cnp.ndarray[char, ndim=1] used = np.empty(n + 1, dtype=np.int8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv[:] = INFINITY
        used[:] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = a[i0, j] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    for j in range(1, n + 1):
        col_of_row[p[j] - 1] = j - 1
