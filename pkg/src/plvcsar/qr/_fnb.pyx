# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Frisch-Newton interior point kernel.

Mirrors ``_fnb_py.fnb_solve`` iteration for iteration. Dense linear algebra
goes through the BLAS/LAPACK shipped with scipy.
"""
from libc.math cimport fabs, sqrt, INFINITY, isfinite
from scipy.linalg.cython_blas cimport dsyrk, dgemv
from scipy.linalg.cython_lapack cimport dpotrf, dpotrs
import numpy as np

cdef double STEP_SCALE = 0.99995


cdef inline double _max_step(double[::1] v, double[::1] dv, double sign, Py_ssize_t n) nogil:
    cdef double a = 1.0, d, r
    cdef Py_ssize_t i
    for i in range(n):
        d = sign * dv[i]
        if d < 0.0:
            r = -v[i] / d
            if r < a:
                a = r
    return a


cdef int _factor(const double[:, ::1] X, double[::1] theta, double[:, ::1] Xs,
                 double[::1, :] C, Py_ssize_t n, Py_ssize_t m) nogil:
    cdef Py_ssize_t i, j
    cdef double st
    cdef char uplo = b'L'
    cdef char trans = b'N'
    cdef int mi = <int>m, ni = <int>n, info = 0
    cdef double one = 1.0, zero = 0.0
    for i in range(n):
        st = sqrt(theta[i])
        for j in range(m):
            Xs[i, j] = X[i, j] * st
    # Xs in row-major storage is the column-major m x n matrix Xs'
    dsyrk(&uplo, &trans, &mi, &ni, &one, &Xs[0, 0], &mi, &zero, &C[0, 0], &mi)
    dpotrf(&uplo, &mi, &C[0, 0], &mi, &info)
    return info


cdef inline void _xt_times(const double[:, ::1] X, const double[::1] v, double[::1] out,
                           Py_ssize_t n, Py_ssize_t m) nogil:
    # out = X' v
    cdef char trans = b'N'
    cdef int mi = <int>m, ni = <int>n, inc = 1
    cdef double one = 1.0, zero = 0.0
    dgemv(&trans, &mi, &ni, &one, &X[0, 0], &mi, &v[0], &inc, &zero, &out[0], &inc)


cdef inline void _x_times(const double[:, ::1] X, const double[::1] v, double[::1] out,
                          Py_ssize_t n, Py_ssize_t m) nogil:
    # out = X v
    cdef char trans = b'T'
    cdef int mi = <int>m, ni = <int>n, inc = 1
    cdef double one = 1.0, zero = 0.0
    dgemv(&trans, &mi, &ni, &one, &X[0, 0], &mi, &v[0], &inc, &zero, &out[0], &inc)


cdef void _direction(const double[:, ::1] X, double[::1, :] C,
                     double[::1] x, double[::1] s, double[::1] z, double[::1] w,
                     double[::1] theta, double[::1] rp, double[::1] rd,
                     double[::1] rc_z, double[::1] rc_w,
                     double[::1] g, double[::1] tmp_n, double[::1] tmp_m,
                     double[::1] dx, double[::1] dy, double[::1] dz, double[::1] dw,
                     Py_ssize_t n, Py_ssize_t m) nogil:
    cdef Py_ssize_t i
    cdef char uplo = b'L'
    cdef int mi = <int>m, one_i = 1, info = 0
    for i in range(n):
        g[i] = rd[i] - rc_z[i] / x[i] + rc_w[i] / s[i]
        tmp_n[i] = theta[i] * g[i]
    _xt_times(X, tmp_n, tmp_m, n, m)
    for i in range(m):
        dy[i] = rp[i] + tmp_m[i]
    dpotrs(&uplo, &mi, &one_i, &C[0, 0], &mi, &dy[0], &mi, &info)
    _x_times(X, dy, tmp_n, n, m)
    for i in range(n):
        dx[i] = theta[i] * (tmp_n[i] - g[i])
        dz[i] = (rc_z[i] - z[i] * dx[i]) / x[i]
        dw[i] = (rc_w[i] + w[i] * dx[i]) / s[i]


def fnb_solve(X_in, y_in, double tau, double eps=1e-8, int max_iter=200):
    """Run the interior point iteration.

    Returns ``(coef, iterations, gap, status)`` with the status codes of the
    pure-Python kernel.
    """
    cdef const double[:, ::1] X = np.ascontiguousarray(X_in, dtype=np.float64)
    cdef const double[::1] y = np.ascontiguousarray(y_in, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0], m = X.shape[1], i, j
    cdef int it, info
    cdef double mu, gap, primal, ap, ad, mu_aff, sigma, shift, acc

    xa = np.empty(n); sa = np.empty(n); za = np.empty(n); wa = np.empty(n)
    cdef double[::1] x = xa, s = sa, z = za, w = wa
    cdef double[::1] yd = np.empty(m), rp = np.empty(m), b = np.empty(m)
    cdef double[::1] rd = np.empty(n), theta = np.empty(n), g = np.empty(n)
    cdef double[::1] tmp_n = np.empty(n), tmp_m = np.empty(m)
    cdef double[::1] rc_z = np.empty(n), rc_w = np.empty(n)
    cdef double[::1] dx = np.empty(n), dz = np.empty(n), dw = np.empty(n)
    cdef double[::1] dy = np.empty(m)
    cdef double[:, ::1] Xs = np.empty((n, m))
    cdef double[::1, :] C = np.empty((m, m), order="F")

    # b = (1 - tau) X'1
    for i in range(n):
        tmp_n[i] = 1.0 - tau
    _xt_times(X, tmp_n, b, n, m)

    # least-squares start for the dual
    for i in range(n):
        x[i] = 1.0 - tau
        s[i] = tau
        theta[i] = 1.0
        tmp_n[i] = -y[i]
    info = _factor(X, theta, Xs, C, n, m)
    if info != 0:
        return np.zeros(m), 0, INFINITY, 2
    _xt_times(X, tmp_n, yd, n, m)
    cdef char uplo = b'L'
    cdef int mi = <int>m, one_i = 1
    dpotrs(&uplo, &mi, &one_i, &C[0, 0], &mi, &yd[0], &mi, &info)
    _x_times(X, yd, rd, n, m)
    acc = 0.0
    for i in range(n):
        rd[i] = -y[i] - rd[i]
        acc += fabs(rd[i])
    shift = 0.1 * acc / n + 1e-10
    gap = 0.0
    for i in range(n):
        z[i] = (rd[i] if rd[i] > 0.0 else 0.0) + shift
        w[i] = (-rd[i] if rd[i] < 0.0 else 0.0) + shift
        gap += x[i] * z[i] + s[i] * w[i]

    for it in range(1, max_iter + 1):
        _xt_times(X, x, tmp_m, n, m)
        for j in range(m):
            rp[j] = b[j] - tmp_m[j]
        _x_times(X, yd, rd, n, m)
        for i in range(n):
            rd[i] = -y[i] - rd[i] - z[i] + w[i]
            theta[i] = 1.0 / (z[i] / x[i] + w[i] / s[i])
        mu = gap / (2.0 * n)
        info = _factor(X, theta, Xs, C, n, m)
        if info != 0:
            return -np.asarray(yd), it, gap, 2

        # predictor
        for i in range(n):
            rc_z[i] = -x[i] * z[i]
            rc_w[i] = -s[i] * w[i]
        _direction(X, C, x, s, z, w, theta, rp, rd, rc_z, rc_w, g, tmp_n, tmp_m,
                   dx, dy, dz, dw, n, m)
        ap = min(_max_step(x, dx, 1.0, n), _max_step(s, dx, -1.0, n))
        ad = min(_max_step(z, dz, 1.0, n), _max_step(w, dw, 1.0, n))
        mu_aff = 0.0
        for i in range(n):
            mu_aff += ((x[i] + ap * dx[i]) * (z[i] + ad * dz[i])
                       + (s[i] - ap * dx[i]) * (w[i] + ad * dw[i]))
        mu_aff /= 2.0 * n
        sigma = (mu_aff / mu) ** 3 if mu > 0.0 else 0.0

        # corrector
        for i in range(n):
            rc_z[i] = sigma * mu - x[i] * z[i] - dx[i] * dz[i]
            rc_w[i] = sigma * mu - s[i] * w[i] + dx[i] * dw[i]
        _direction(X, C, x, s, z, w, theta, rp, rd, rc_z, rc_w, g, tmp_n, tmp_m,
                   dx, dy, dz, dw, n, m)
        ap = min(1.0, STEP_SCALE * min(_max_step(x, dx, 1.0, n), _max_step(s, dx, -1.0, n)))
        ad = min(1.0, STEP_SCALE * min(_max_step(z, dz, 1.0, n), _max_step(w, dw, 1.0, n)))

        gap = 0.0
        primal = 0.0
        for i in range(n):
            x[i] += ap * dx[i]
            s[i] -= ap * dx[i]
            z[i] += ad * dz[i]
            w[i] += ad * dw[i]
            gap += x[i] * z[i] + s[i] * w[i]
            primal -= y[i] * x[i]
        for j in range(m):
            yd[j] += ad * dy[j]
        if gap <= eps * max(1.0, fabs(primal)):
            return -np.asarray(yd), it, gap, 0
        if not isfinite(gap):
            return -np.asarray(yd), it, gap, 2
    return -np.asarray(yd), max_iter, gap, 1
