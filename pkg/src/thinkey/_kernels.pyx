# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: SplitMix64 stream generation and one-sided Jacobi sweeps.

Both functions mirror ``_kernels_py`` exactly in algorithm and loop order.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, exp
from libc.stdint cimport uint64_t

cnp.import_array()

cdef uint64_t GAMMA = 0x9E3779B97F4A7C15ULL


cdef inline uint64_t _mix(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


def splitmix64_fill(uint64_t state, Py_ssize_t n):
    """Return (n outputs, advanced state)."""
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            state = state + GAMMA
            o[i] = _mix(state)
    return out, state


def jacobi_sweeps(double[::1, :] a, double[::1, :] v, double tol, int max_sweeps):
    """Orthogonalize the columns of ``a`` in place, accumulating rotations into ``v``.

    Cyclic-by-row pair order. Returns the number of sweeps run, or -1 when
    ``max_sweeps`` is exhausted without a rotation-free sweep.
    """
    cdef int result
    with nogil:
        result = _jacobi(a, v, tol, max_sweeps)
    return result


cdef int _jacobi(double[::1, :] a, double[::1, :] v, double tol, int max_sweeps) noexcept nogil:
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1], nv = v.shape[0]
    cdef Py_ssize_t p, q, i
    cdef double alpha, beta, gamma, zeta, t, c, s, x, y
    cdef int sweep, rotated
    for sweep in range(max_sweeps):
        rotated = 0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    x = a[i, p]
                    y = a[i, q]
                    alpha += x * x
                    beta += y * y
                    gamma += x * y
                if gamma == 0.0 or fabs(gamma) <= tol * sqrt(alpha * beta):
                    continue
                rotated = 1
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    x = a[i, p]
                    y = a[i, q]
                    a[i, p] = c * x - s * y
                    a[i, q] = s * x + c * y
                for i in range(nv):
                    x = v[i, p]
                    y = v[i, q]
                    v[i, p] = c * x - s * y
                    v[i, q] = s * x + c * y
        if not rotated:
            return sweep + 1
    return -1


# ----------------------------------------------------------- fused elementwise

cdef double GELU_C = 0.7978845608028654  # sqrt(2 / pi)


def gelu_forward(double[:, ::1] x):
    """tanh-GELU. Returns (y, t) where t is the tanh term reused by the backward."""
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    y_arr = np.empty((n, m))
    t_arr = np.empty((n, m))
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] t = t_arr
    cdef double v, z, sg
    # 0.5 * (1 + tanh(z)) = 1 / (1 + exp(-2z)); numpy's vectorized exp is far
    # faster than scalar libm tanh, whose cost grows for small |z|
    with nogil:
        for i in range(n):
            for j in range(m):
                v = x[i, j]
                z = -2.0 * GELU_C * v * (1.0 + 0.044715 * v * v)
                t[i, j] = z if z < 80.0 else 80.0
    np.exp(t_arr, out=t_arr)
    with nogil:
        for i in range(n):
            for j in range(m):
                sg = 1.0 / (1.0 + t[i, j])
                t[i, j] = 2.0 * sg - 1.0
                y[i, j] = x[i, j] * sg
    return y_arr, t_arr


def gelu_backward(double[:, ::1] dy, double[:, ::1] x, double[:, ::1] t):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    dx_arr = np.empty((n, m))
    cdef double[:, ::1] dx = dx_arr
    cdef double v, th
    with nogil:
        for i in range(n):
            for j in range(m):
                v = x[i, j]
                th = t[i, j]
                dx[i, j] = dy[i, j] * (0.5 * (1.0 + th)
                                       + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3 * 0.044715 * v * v))
    return dx_arr


def layernorm_forward(double[:, ::1] x, double[::1] g, double eps):
    """Gain-only layer norm over rows. Returns (y, xhat, rstd[:, None])."""
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    y_arr = np.empty((n, m))
    xhat_arr = np.empty((n, m))
    rstd_arr = np.empty((n, 1))
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[:, ::1] rstd = rstd_arr
    cdef double mu, var, c, r
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(m):
                mu += x[i, j]
            mu /= m
            var = 0.0
            for j in range(m):
                c = x[i, j] - mu
                var += c * c
            r = 1.0 / sqrt(var / m + eps)
            rstd[i, 0] = r
            for j in range(m):
                c = (x[i, j] - mu) * r
                xhat[i, j] = c
                y[i, j] = c * g[j]
    return y_arr, xhat_arr, rstd_arr


def layernorm_backward(double[:, ::1] dy, double[:, ::1] xhat, double[:, ::1] rstd, double[::1] g):
    """Returns (dx, dg[None, :])."""
    cdef Py_ssize_t n = xhat.shape[0], m = xhat.shape[1], i, j
    dx_arr = np.empty((n, m))
    dg_arr = np.zeros((1, m))
    cdef double[:, ::1] dx = dx_arr
    cdef double[:, ::1] dg = dg_arr
    cdef double a, b, d
    with nogil:
        for i in range(n):
            a = 0.0
            b = 0.0
            for j in range(m):
                d = dy[i, j] * g[j]
                a += d
                b += d * xhat[i, j]
                dg[0, j] += dy[i, j] * xhat[i, j]
            a /= m
            b /= m
            for j in range(m):
                dx[i, j] = rstd[i, 0] * (dy[i, j] * g[j] - a - xhat[i, j] * b)
    return dx_arr, dg_arr


def softmax_forward(double[:, :, ::1] z, double scale, bint causal, double mask_value):
    """Row softmax of scale * z for a stack of n x n (or n x k) score matrices."""
    cdef Py_ssize_t s = z.shape[0], n = z.shape[1], k = z.shape[2], a, i, j, lim
    out_arr = np.empty((s, n, k))
    cdef double[:, :, ::1] out = out_arr
    cdef double mx, tot, v
    with nogil:
        for a in range(s):
            for i in range(n):
                lim = i + 1 if causal else k
                mx = mask_value
                for j in range(lim):
                    v = z[a, i, j] * scale
                    if v > mx:
                        mx = v
                tot = 0.0
                for j in range(lim):
                    v = exp(z[a, i, j] * scale - mx)
                    out[a, i, j] = v
                    tot += v
                for j in range(lim):
                    out[a, i, j] /= tot
                for j in range(lim, k):
                    out[a, i, j] = 0.0
    return out_arr


def softmax_backward(double[:, :, ::1] p, double[:, :, ::1] dp, double scale):
    """Gradient wrt the unscaled logits: scale * p * (dp - sum(dp * p))."""
    cdef Py_ssize_t s = p.shape[0], n = p.shape[1], k = p.shape[2], a, i, j
    out_arr = np.empty((s, n, k))
    cdef double[:, :, ::1] out = out_arr
    cdef double dot
    with nogil:
        for a in range(s):
            for i in range(n):
                dot = 0.0
                for j in range(k):
                    dot += dp[a, i, j] * p[a, i, j]
                for j in range(k):
                    out[a, i, j] = scale * p[a, i, j] * (dp[a, i, j] - dot)
    return out_arr
