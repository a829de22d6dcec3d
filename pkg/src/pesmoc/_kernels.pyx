# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: dominance filtering, 2-D hypervolume sweep and the
batched EP factor derivatives. Mirrors ``pesmoc._fallback``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt, expm1, erfc, INFINITY, isfinite

cnp.import_array()

cdef double VAR_EPS = 1e-14
cdef double LOG_SQRT_2PI = 0.9189385332046727
cdef double SQRT1_2 = 0.7071067811865476


cdef inline double log_ndtr(double a) noexcept nogil:
    # log of the standard normal cdf
    cdef double t, s, term
    cdef int n
    if a > 0.0:
        return log1p(-0.5 * erfc(a * SQRT1_2))
    if a > -30.0:
        return log(0.5 * erfc(-a * SQRT1_2))
    # asymptotic series in the far tail
    t = 1.0 / (a * a)
    s = 1.0
    term = 1.0
    for n in range(1, 10):
        term *= -(2 * n - 1) * t
        s += term
    return -0.5 * a * a - log(-a) - LOG_SQRT_2PI + log(s)


def nondominated_mask(Y):
    cdef double[:, ::1] A = np.ascontiguousarray(Y, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0]
    cdef Py_ssize_t K = A.shape[1] if A.ndim == 2 else 0
    mask_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] mask = mask_arr
    if n == 0:
        return mask_arr.astype(bool)
    cdef long[::1] order = np.lexsort(np.asarray(A).T[::-1]).astype(np.int_)
    cdef long[::1] front = np.empty(n, dtype=np.int_)
    cdef Py_ssize_t size = 0, a, b, k, i, j
    cdef bint dominated, all_le, any_lt
    for a in range(n):
        i = order[a]
        dominated = False
        for b in range(size):
            j = front[b]
            all_le = True
            any_lt = False
            for k in range(K):
                if A[j, k] > A[i, k]:
                    all_le = False
                    break
                if A[j, k] < A[i, k]:
                    any_lt = True
            if all_le and any_lt:
                dominated = True
                break
        if not dominated:
            front[size] = i
            size += 1
            mask[i] = 1
    return mask_arr.astype(bool)


def hypervolume_2d(points, ref):
    P = np.asarray(points, dtype=np.float64)
    if P.size == 0:
        return 0.0
    cdef double r0 = float(ref[0]), r1 = float(ref[1])
    P = P[(P[:, 0] < r0) & (P[:, 1] < r1)]
    if P.shape[0] == 0:
        return 0.0
    cdef double[:, ::1] S = np.ascontiguousarray(P[np.lexsort((P[:, 1], P[:, 0]))])
    cdef double area = 0.0, level = r1
    cdef Py_ssize_t i
    for i in range(S.shape[0]):
        if S[i, 1] < level:
            area += (r0 - S[i, 0]) * (level - S[i, 1])
            level = S[i, 1]
    return area


cdef inline void _step(double m, double v, double* lc, double* r, double* h) noexcept nogil:
    cdef double sv, alpha, lam
    if v < VAR_EPS:
        lc[0] = 0.0 if m >= 0.0 else -INFINITY
        r[0] = 0.0
        h[0] = 0.0
        return
    sv = sqrt(v)
    alpha = m / sv
    lc[0] = log_ndtr(alpha)
    lam = exp(-0.5 * alpha * alpha - LOG_SQRT_2PI - lc[0])
    r[0] = lam / sv
    h[0] = -lam * (lam + alpha) / v


def phi_derivatives(m, v):
    cdef double[::1] M = np.ascontiguousarray(m, dtype=np.float64).ravel()
    cdef double[::1] V = np.ascontiguousarray(v, dtype=np.float64).ravel()
    shape = np.shape(m)
    cdef Py_ssize_t n = M.shape[0], i
    lc_a = np.empty(n)
    r_a = np.empty(n)
    h_a = np.empty(n)
    cdef double[::1] lc = lc_a, r = r_a, h = h_a
    with nogil:
        for i in range(n):
            _step(M[i], V[i], &lc[i], &r[i], &h[i])
    return lc_a.reshape(shape), r_a.reshape(shape), h_a.reshape(shape)


def omega_derivatives(mc, vc, md, vd):
    cdef double[:, ::1] MC = np.ascontiguousarray(np.atleast_2d(mc), dtype=np.float64)
    cdef double[:, ::1] VC = np.ascontiguousarray(np.atleast_2d(vc), dtype=np.float64)
    cdef double[:, ::1] MD = np.ascontiguousarray(np.atleast_2d(md), dtype=np.float64)
    cdef double[:, ::1] VD = np.ascontiguousarray(np.atleast_2d(vd), dtype=np.float64)
    cdef Py_ssize_t F = MD.shape[0], K = MD.shape[1], C = MC.shape[1]
    cdef Py_ssize_t f, j, k
    log_z_a = np.empty(F)
    gc_a = np.empty((F, C))
    Hc_a = np.empty((F, C))
    gd_a = np.empty((F, K))
    Hd_a = np.empty((F, K))
    rc_a = np.empty((F, C))
    hc_a = np.empty((F, C))
    rd_a = np.empty((F, K))
    hd_a = np.empty((F, K))
    cdef double[::1] log_z = log_z_a
    cdef double[:, ::1] gc = gc_a, Hc = Hc_a, gd = gd_a, Hd = Hd_a
    cdef double[:, ::1] rc = rc_a, hc = hc_a, rd = rd_a, hd = hd_a
    cdef double lab, lc, z, rho
    with nogil:
        for f in range(F):
            lab = 0.0
            for j in range(C):
                _step(MC[f, j], VC[f, j], &lc, &rc[f, j], &hc[f, j])
                lab += lc
            for k in range(K):
                _step(MD[f, k], VD[f, k], &lc, &rd[f, k], &hd[f, k])
                lab += lc
            if lab == -INFINITY:
                z = 1.0
                log_z[f] = 0.0
                rho = 0.0
            else:
                z = -expm1(lab)
                if z > 0.0:
                    log_z[f] = log(z)
                    rho = exp(lab - log_z[f])
                else:
                    log_z[f] = -INFINITY
                    rho = 0.0
            if not isfinite(rho):
                rho = 0.0
            for j in range(C):
                gc[f, j] = -rho * rc[f, j]
                Hc[f, j] = -rho * (rc[f, j] * rc[f, j] + hc[f, j]) - rho * rho * rc[f, j] * rc[f, j]
            for k in range(K):
                gd[f, k] = -rho * rd[f, k]
                Hd[f, k] = -rho * (rd[f, k] * rd[f, k] + hd[f, k]) - rho * rho * rd[f, k] * rd[f, k]
    return log_z_a, gc_a, Hc_a, gd_a, Hd_a
