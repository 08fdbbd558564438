# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loss kernels; same contracts as ``_numpy_kernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, INFINITY

cnp.import_array()


cdef void _normalize(const double[:, ::1] x, double[:, ::1] xhat, double[::1] norms) noexcept nogil:
    cdef Py_ssize_t i, k, n = x.shape[0], d = x.shape[1]
    cdef double s
    for i in range(n):
        s = 0.0
        for k in range(d):
            s += x[i, k] * x[i, k]
        s = sqrt(s)
        norms[i] = s
        if s > 0:
            for k in range(d):
                xhat[i, k] = x[i, k] / s
        else:
            for k in range(d):
                xhat[i, k] = 0.0


cdef void _normalize_backward(const double[:, ::1] xhat, const double[::1] norms,
                              double[:, ::1] g) noexcept nogil:
    # in place: g <- (g - xhat (xhat . g)) / ||x||
    cdef Py_ssize_t i, k, n = xhat.shape[0], d = xhat.shape[1]
    cdef double p
    for i in range(n):
        if norms[i] == 0:
            for k in range(d):
                g[i, k] = 0.0
            continue
        p = 0.0
        for k in range(d):
            p += xhat[i, k] * g[i, k]
        for k in range(d):
            g[i, k] = (g[i, k] - xhat[i, k] * p) / norms[i]


def masked_contrastive(a, b, pos, den, double tau):
    cdef double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] B = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[:, ::1] Pm = np.ascontiguousarray(pos, dtype=np.float64)
    cdef double[:, ::1] Dm = np.ascontiguousarray(den, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], d = A.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double[:, ::1] Ah = np.empty((n, d))
    cdef double[:, ::1] Bh = np.empty((m, d))
    cdef double[::1] an = np.empty(n)
    cdef double[::1] bn = np.empty(m)
    cdef double[:, ::1] L = np.empty((n, m))
    ga_arr = np.zeros((n, d))
    gb_arr = np.zeros((m, d))
    cdef double[:, ::1] gA = ga_arr
    cdef double[:, ::1] gB = gb_arr
    cdef double[::1] row = np.empty(m)
    cdef double s, mx, tot, npos, lse, acc, loss = 0.0, w
    cdef Py_ssize_t n_scored = 0

    with nogil:
        _normalize(A, Ah, an)
        _normalize(B, Bh, bn)
        for i in range(n):
            for j in range(m):
                s = 0.0
                for k in range(d):
                    s += Ah[i, k] * Bh[j, k]
                L[i, j] = s / tau
        for i in range(n):
            npos = 0.0
            for j in range(m):
                npos += Pm[i, j]
            if npos > 0:
                n_scored += 1

    if n_scored == 0:
        return 0.0, ga_arr, gb_arr, 0

    with nogil:
        for i in range(n):
            npos = 0.0
            for j in range(m):
                npos += Pm[i, j]
            if npos == 0:
                continue
            mx = -INFINITY
            for j in range(m):
                if Dm[i, j] > 0 and L[i, j] > mx:
                    mx = L[i, j]
            if mx == -INFINITY:
                mx = 0.0
            tot = 0.0
            for j in range(m):
                row[j] = exp(L[i, j] - mx) * Dm[i, j]
                tot += row[j]
            if tot <= 0:
                tot = 1.0
            lse = log(tot) + mx
            acc = 0.0
            for j in range(m):
                acc += Pm[i, j] * L[i, j]
            loss += lse - acc / npos
            # d loss / d sim_ij, then chain into the normalized vectors
            for j in range(m):
                w = (row[j] / tot - Pm[i, j] / npos) / (n_scored * tau)
                if w != 0:
                    for k in range(d):
                        gA[i, k] += w * Bh[j, k]
                        gB[j, k] += w * Ah[i, k]
        _normalize_backward(Ah, an, gA)
        _normalize_backward(Bh, bn, gB)

    return loss / n_scored, ga_arr, gb_arr, n_scored


def triplet(h, hp, hn, double alpha):
    cdef double[:, ::1] H = np.ascontiguousarray(h, dtype=np.float64)
    cdef double[:, ::1] HP = np.ascontiguousarray(hp, dtype=np.float64)
    cdef double[:, ::1] HN = np.ascontiguousarray(hn, dtype=np.float64)
    cdef Py_ssize_t n = H.shape[0], d = H.shape[1], i, k
    gh_arr = np.zeros((n, d))
    gp_arr = np.zeros((n, d))
    gn_arr = np.zeros((n, d))
    cdef double[:, ::1] gh = gh_arr
    cdef double[:, ::1] gp = gp_arr
    cdef double[:, ::1] gn = gn_arr
    cdef double dp, dn, t, margin, loss = 0.0, up, un
    if n == 0:
        return 0.0, gh_arr, gp_arr, gn_arr
    with nogil:
        for i in range(n):
            dp = 0.0
            dn = 0.0
            for k in range(d):
                t = H[i, k] - HP[i, k]
                dp += t * t
                t = H[i, k] - HN[i, k]
                dn += t * t
            dp = sqrt(dp)
            dn = sqrt(dn)
            margin = dp - dn + alpha
            if margin <= 0:
                continue
            loss += margin
            up = 1.0 / (dp * n) if dp > 0 else 0.0
            un = 1.0 / (dn * n) if dn > 0 else 0.0
            for k in range(d):
                t = (H[i, k] - HP[i, k]) * up
                gp[i, k] = -t
                gh[i, k] = t
                t = (H[i, k] - HN[i, k]) * un
                gn[i, k] = t
                gh[i, k] -= t
    return loss / n, gh_arr, gp_arr, gn_arr


def softmax_xent(logits, labels):
    cdef double[:, ::1] Z = np.ascontiguousarray(logits, dtype=np.float64)
    cdef long long[::1] y = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t n = Z.shape[0], m = Z.shape[1], i, j
    g_arr = np.zeros((n, m))
    cdef double[:, ::1] g = g_arr
    cdef double mx, tot, loss = 0.0
    if n == 0:
        return 0.0, g_arr
    with nogil:
        for i in range(n):
            mx = Z[i, 0]
            for j in range(1, m):
                if Z[i, j] > mx:
                    mx = Z[i, j]
            tot = 0.0
            for j in range(m):
                g[i, j] = exp(Z[i, j] - mx)
                tot += g[i, j]
            loss -= Z[i, y[i]] - mx - log(tot)
            for j in range(m):
                g[i, j] = g[i, j] / tot / n
            g[i, y[i]] -= 1.0 / n
    return loss / n, g_arr
