# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled integration kernels for affine dynamics with a radial polynomial psi.

Same algorithms, argument order and status codes as ``_pykernels``; the
model is unpacked once into a C struct so the inner loops never touch
Python objects.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, ceil, fabs, isfinite
from libc.stdlib cimport malloc, free

cnp.import_array()

DEF MAXN = 16
DEF MAXM = 16

cdef double EXP_LO = -745.0
cdef double EXP_HI = 50.0
cdef long MAX_SUBSTEPS = 1 << 22


cdef struct Model:
    int n
    int m
    int K
    double gamma
    double A[MAXN * MAXN]
    double B[MAXN * MAXM]
    double c[MAXN]
    double d[MAXN]
    double coef[8]
    double center[MAXN]
    double a_fro


cdef struct Pen:
    double e
    double psi
    double dp     # P'(s)
    double ddp    # P''(s)
    double grad[MAXN]
    double diff[MAXN]
    double gnorm2


cdef int _load(Model* M, model, double gamma) except -1:
    A = np.ascontiguousarray(model.A, dtype=np.float64)
    B = np.ascontiguousarray(model.B, dtype=np.float64)
    c = np.ascontiguousarray(model.c, dtype=np.float64)
    d = np.ascontiguousarray(model.d, dtype=np.float64)
    coef = np.ascontiguousarray(model.coeffs, dtype=np.float64)
    center = np.ascontiguousarray(model.center, dtype=np.float64)
    cdef int n = A.shape[0]
    cdef int m = B.shape[1]
    if n > MAXN or m > MAXM or coef.shape[0] > 8:
        raise ValueError("model too large for the compiled kernels")
    M.n = n
    M.m = m
    M.K = coef.shape[0]
    M.gamma = gamma
    cdef int i, j
    cdef double fro = 0.0
    for i in range(n):
        M.c[i] = c[i]
        M.d[i] = d[i]
        M.center[i] = center[i]
        for j in range(n):
            M.A[i * n + j] = A[i, j]
            fro += A[i, j] * A[i, j]
        for j in range(m):
            M.B[i * m + j] = B[i, j]
    M.a_fro = sqrt(fro)
    for i in range(M.K):
        M.coef[i] = coef[i]
    return 0


cdef inline void _pen(const Model* M, const double* x, Pen* P) nogil:
    cdef int i, k
    cdef double s = 0.0
    for i in range(M.n):
        P.diff[i] = x[i] - M.center[i]
        s += P.diff[i] * P.diff[i]
    # Horner for P, P', P''
    cdef double p0 = 0.0, p1 = 0.0, p2 = 0.0
    for k in range(M.K - 1, -1, -1):
        p0 = p0 * s + M.coef[k]
    for k in range(M.K - 1, 0, -1):
        p1 = p1 * s + k * M.coef[k]
    for k in range(M.K - 1, 1, -1):
        p2 = p2 * s + k * (k - 1) * M.coef[k]
    P.psi = p0
    P.dp = p1
    P.ddp = p2
    cdef double z = M.gamma * p0
    if z < EXP_LO:
        z = EXP_LO
    elif z > EXP_HI:
        z = EXP_HI
    P.e = exp(z)
    P.gnorm2 = 0.0
    for i in range(M.n):
        P.grad[i] = 2.0 * p1 * P.diff[i]
        P.gnorm2 += P.grad[i] * P.grad[i]


cdef inline void _fphi(const Model* M, double t, const double* x, const double* u, double* out) nogil:
    cdef int i, j
    cdef int n = M.n, m = M.m
    for i in range(n):
        out[i] = M.c[i] * t + M.d[i]
        for j in range(n):
            out[i] += M.A[i * n + j] * x[j]
        for j in range(m):
            out[i] += M.B[i * m + j] * u[j]


cdef inline double _rhs(const Model* M, double t, const double* x, const double* u,
                        double* out, Pen* P) nogil:
    """Penalized rhs into ``out``; returns ``||f_phi||``."""
    _fphi(M, t, x, u, out)
    cdef int i
    cdef double fn = 0.0
    for i in range(M.n):
        fn += out[i] * out[i]
    _pen(M, x, P)
    cdef double ge = M.gamma * P.e
    for i in range(M.n):
        out[i] -= ge * P.grad[i]
    return sqrt(fn)


cdef inline void _jt(const Model* M, const double* x, const double* v,
                     double* gx, double* gu) nogil:
    """``(dF/dx)^T v`` into gx and ``B^T v`` into gu."""
    cdef Pen P
    _pen(M, x, &P)
    cdef int i, j
    cdef int n = M.n, m = M.m
    cdef double dv = 0.0, gv = 0.0
    for i in range(n):
        dv += P.diff[i] * v[i]
        gv += P.grad[i] * v[i]
    cdef double ge = M.gamma * P.e
    for j in range(n):
        gx[j] = 0.0
        for i in range(n):
            gx[j] += M.A[i * n + j] * v[i]
        gx[j] -= ge * (2.0 * P.dp * v[j] + 4.0 * P.ddp * P.diff[j] * dv + M.gamma * P.grad[j] * gv)
    for j in range(m):
        gu[j] = 0.0
        for i in range(n):
            gu[j] += M.B[i * m + j] * v[i]


cdef inline double _stiffness(const Model* M, const double* x) nogil:
    cdef Pen P
    _pen(M, x, &P)
    cdef int n = M.n
    cdef int i, j
    # Frobenius norm of 2P' I + 4P'' d d^T
    cdef double dd = 0.0
    for i in range(n):
        dd += P.diff[i] * P.diff[i]
    cdef double hf = 0.0, hij
    for i in range(n):
        for j in range(n):
            hij = 4.0 * P.ddp * P.diff[i] * P.diff[j]
            if i == j:
                hij += 2.0 * P.dp
            hf += hij * hij
    return M.gamma * P.e * (M.gamma * P.gnorm2 + sqrt(hf)) + M.a_fro


cdef inline void _lerp(const double* ua, const double* ub, double w, int m, double* out) nogil:
    cdef int j
    for j in range(m):
        out[j] = ua[j] + w * (ub[j] - ua[j])


cdef inline int _rk4(const Model* M, double tau, double hs, const double* y,
                     const double* u1, const double* u2, const double* u4,
                     double* y_new, double* p0, double* fn, double* xq) nogil:
    """One RK4 step; ``xq`` receives the RK4 quadrature of ``xi`` over the step."""
    cdef double k1[MAXN]
    cdef double k2[MAXN]
    cdef double k3[MAXN]
    cdef double k4[MAXN]
    cdef double tmp[MAXN]
    cdef Pen P
    cdef int i, n = M.n
    fn[0] = _rhs(M, tau, y, u1, k1, &P)
    p0[0] = M.gamma * P.e * sqrt(P.gnorm2)
    cdef double esum = P.e
    for i in range(n):
        tmp[i] = y[i] + 0.5 * hs * k1[i]
    _rhs(M, tau + 0.5 * hs, tmp, u2, k2, &P)
    esum += 2.0 * P.e
    for i in range(n):
        tmp[i] = y[i] + 0.5 * hs * k2[i]
    _rhs(M, tau + 0.5 * hs, tmp, u2, k3, &P)
    esum += 2.0 * P.e
    for i in range(n):
        tmp[i] = y[i] + hs * k3[i]
    _rhs(M, tau + hs, tmp, u4, k4, &P)
    esum += P.e
    xq[0] = (hs / 6.0) * M.gamma * esum
    cdef int finite = 1
    for i in range(n):
        y_new[i] = y[i] + (hs / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        if not isfinite(y_new[i]):
            finite = 0
    return finite


def forward(model, grid, x0, u, double gamma, substeps=None, double c_stab=1.5, double rel_change=0.1,
            double c_max=2.5):
    cdef Model M
    _load(&M, model, gamma)
    cdef double[::1] tg = np.ascontiguousarray(grid, dtype=np.float64)
    cdef double[:, ::1] uv = np.ascontiguousarray(np.asarray(u, dtype=np.float64).reshape(tg.shape[0], -1))
    cdef Py_ssize_t N = tg.shape[0] - 1
    cdef int n = M.n, mu = M.m
    states_np = np.empty((N + 1, n))
    subs_np = np.empty(N, dtype=np.int64)
    cdef double[:, ::1] st = states_np
    cdef long long[::1] subs = subs_np
    cdef long long[::1] fixed_subs
    cdef bint fixed = substeps is not None
    if fixed:
        fixed_subs = np.ascontiguousarray(substeps, dtype=np.int64)
    cdef Py_ssize_t i
    cdef long m, s
    cdef int k, ok, status = 0
    cdef double h, hs, tau, t_i, p0, p1, fn, dy, xq
    cdef double y[MAXN]
    cdef double y_new[MAXN]
    cdef double u1[MAXM]
    cdef double u2[MAXM]
    cdef double u4[MAXM]
    cdef Pen P
    for k in range(n):
        st[0, k] = x0[k]
    with nogil:
        for i in range(N):
            t_i = tg[i]
            h = tg[i + 1] - t_i
            if fixed:
                m = fixed_subs[i]
            else:
                m = <long>ceil(h * _stiffness(&M, &st[i, 0]) / c_stab)
                if m < 1:
                    m = 1
            while True:
                hs = h / m
                for k in range(n):
                    y[k] = st[i, k]
                ok = 1
                for s in range(m):
                    tau = t_i + s * hs
                    _lerp(&uv[i, 0], &uv[i + 1, 0], <double>s / m, mu, u1)
                    _lerp(&uv[i, 0], &uv[i + 1, 0], (s + 0.5) / m, mu, u2)
                    _lerp(&uv[i, 0], &uv[i + 1, 0], (s + 1.0) / m, mu, u4)
                    if not _rk4(&M, tau, hs, y, u1, u2, u4, y_new, &p0, &fn, &xq):
                        if fixed:
                            status = 2
                        ok = 0
                        break
                    if not fixed:
                        _pen(&M, y_new, &P)
                        p1 = M.gamma * P.e * sqrt(P.gnorm2)
                        # stiff stages can overshoot into the deep interior; bound the displacement too
                        dy = 0.0
                        for k in range(n):
                            dy += (y_new[k] - y[k]) * (y_new[k] - y[k])
                        if not (fabs(p1 - p0) <= rel_change * max(p0, 0.1 * fn + 1e-8)
                                and hs * _stiffness(&M, y_new) <= c_max
                                and sqrt(dy) <= 2.0 * hs * (fn + max(p0, p1))):
                            ok = 0
                            break
                    for k in range(n):
                        y[k] = y_new[k]
                if status != 0:
                    break
                if ok:
                    break
                m *= 2
                if m > MAX_SUBSTEPS:
                    status = 1
                    break
            if status != 0:
                break
            for k in range(n):
                st[i + 1, k] = y[k]
            subs[i] = m
    return states_np, subs_np, status


cdef void _fill_substeps(const Model* M, double t_i, double h, long m, const double* x,
                         const double* ua, const double* ub, double* ys) nogil:
    cdef int n = M.n, mu = M.m
    cdef double hs = h / m
    cdef long s
    cdef int k
    cdef double p0, fn, xq
    cdef double u1[MAXM]
    cdef double u2[MAXM]
    cdef double u4[MAXM]
    for k in range(n):
        ys[k] = x[k]
    for s in range(m):
        _lerp(ua, ub, <double>s / m, mu, u1)
        _lerp(ua, ub, (s + 0.5) / m, mu, u2)
        _lerp(ua, ub, (s + 1.0) / m, mu, u4)
        _rk4(M, t_i + s * hs, hs, &ys[s * n], u1, u2, u4, &ys[(s + 1) * n], &p0, &fn, &xq)


def xi_integrals(model, grid, states, u, double gamma, substeps):
    cdef Model M
    _load(&M, model, gamma)
    cdef double[::1] tg = np.ascontiguousarray(grid, dtype=np.float64)
    cdef double[:, ::1] uv = np.ascontiguousarray(np.asarray(u, dtype=np.float64).reshape(tg.shape[0], -1))
    cdef double[:, ::1] st = np.ascontiguousarray(states, dtype=np.float64)
    cdef long long[::1] subs = np.ascontiguousarray(substeps, dtype=np.int64)
    cdef Py_ssize_t N = tg.shape[0] - 1
    cdef int n = M.n, mu = M.m
    out_np = np.zeros(N)
    cdef double[::1] out = out_np
    cdef Py_ssize_t i
    cdef long m, s
    cdef int k
    cdef double h, hs, p0, fn, xq
    cdef double y[MAXN]
    cdef double y_new[MAXN]
    cdef double u1[MAXM]
    cdef double u2[MAXM]
    cdef double u4[MAXM]
    with nogil:
        for i in range(N):
            h = tg[i + 1] - tg[i]
            m = subs[i]
            hs = h / m
            for k in range(n):
                y[k] = st[i, k]
            for s in range(m):
                _lerp(&uv[i, 0], &uv[i + 1, 0], <double>s / m, mu, u1)
                _lerp(&uv[i, 0], &uv[i + 1, 0], (s + 0.5) / m, mu, u2)
                _lerp(&uv[i, 0], &uv[i + 1, 0], (s + 1.0) / m, mu, u4)
                _rk4(&M, tg[i] + s * hs, hs, y, u1, u2, u4, y_new, &p0, &fn, &xq)
                out[i] += xq
                for k in range(n):
                    y[k] = y_new[k]
    return out_np


def vjp(model, grid, u, double gamma, substeps, states, bar_xN):
    cdef Model M
    _load(&M, model, gamma)
    cdef double[::1] tg = np.ascontiguousarray(grid, dtype=np.float64)
    cdef double[:, ::1] uv = np.ascontiguousarray(np.asarray(u, dtype=np.float64).reshape(tg.shape[0], -1))
    cdef double[:, ::1] st = np.ascontiguousarray(states, dtype=np.float64)
    cdef long long[::1] subs = np.ascontiguousarray(substeps, dtype=np.int64)
    cdef Py_ssize_t N = tg.shape[0] - 1
    cdef int n = M.n, mu = M.m
    bar_u_np = np.zeros((N + 1, mu))
    cdef double[:, ::1] bu = bar_u_np
    cdef double a[MAXN]
    cdef int k, j
    for k in range(n):
        a[k] = bar_xN[k]
    cdef long mmax = 1
    cdef Py_ssize_t i
    for i in range(N):
        if subs[i] > mmax:
            mmax = subs[i]
    cdef double* ys = <double*>malloc((mmax + 1) * n * sizeof(double))
    if ys == NULL:
        raise MemoryError()
    cdef long m, s
    cdef double t_i, h, hs, tau, w1, w2, w4
    cdef double u1[MAXM]
    cdef double u2[MAXM]
    cdef double u4[MAXM]
    cdef double k1[MAXN]
    cdef double k2[MAXN]
    cdef double k3[MAXN]
    cdef double y2[MAXN]
    cdef double y3[MAXN]
    cdef double y4[MAXN]
    cdef double gk[MAXN]
    cdef double gy1[MAXN]
    cdef double gy2[MAXN]
    cdef double gy3[MAXN]
    cdef double gy4[MAXN]
    cdef double gu1[MAXM]
    cdef double gu2[MAXM]
    cdef double gu3[MAXM]
    cdef double gu4[MAXM]
    cdef double* y1
    cdef Pen P
    try:
        with nogil:
            for i in range(N - 1, -1, -1):
                t_i = tg[i]
                h = tg[i + 1] - t_i
                m = subs[i]
                hs = h / m
                _fill_substeps(&M, t_i, h, m, &st[i, 0], &uv[i, 0], &uv[i + 1, 0], ys)
                for s in range(m - 1, -1, -1):
                    tau = t_i + s * hs
                    w1 = <double>s / m
                    w2 = (s + 0.5) / m
                    w4 = (s + 1.0) / m
                    _lerp(&uv[i, 0], &uv[i + 1, 0], w1, mu, u1)
                    _lerp(&uv[i, 0], &uv[i + 1, 0], w2, mu, u2)
                    _lerp(&uv[i, 0], &uv[i + 1, 0], w4, mu, u4)
                    y1 = &ys[s * n]
                    _rhs(&M, tau, y1, u1, k1, &P)
                    for k in range(n):
                        y2[k] = y1[k] + 0.5 * hs * k1[k]
                    _rhs(&M, tau + 0.5 * hs, y2, u2, k2, &P)
                    for k in range(n):
                        y3[k] = y1[k] + 0.5 * hs * k2[k]
                    _rhs(&M, tau + 0.5 * hs, y3, u2, k3, &P)
                    for k in range(n):
                        y4[k] = y1[k] + hs * k3[k]
                    for k in range(n):
                        gk[k] = (hs / 6.0) * a[k]
                    _jt(&M, y4, gk, gy4, gu4)
                    for k in range(n):
                        gk[k] = (hs / 3.0) * a[k] + hs * gy4[k]
                    _jt(&M, y3, gk, gy3, gu3)
                    for k in range(n):
                        gk[k] = (hs / 3.0) * a[k] + 0.5 * hs * gy3[k]
                    _jt(&M, y2, gk, gy2, gu2)
                    for k in range(n):
                        gk[k] = (hs / 6.0) * a[k] + 0.5 * hs * gy2[k]
                    _jt(&M, y1, gk, gy1, gu1)
                    for k in range(n):
                        a[k] = a[k] + gy1[k] + gy2[k] + gy3[k] + gy4[k]
                    for j in range(mu):
                        bu[i, j] += (1 - w1) * gu1[j] + (1 - w2) * (gu2[j] + gu3[j]) + (1 - w4) * gu4[j]
                        bu[i + 1, j] += w1 * gu1[j] + w2 * (gu2[j] + gu3[j]) + w4 * gu4[j]
    finally:
        free(ys)
    bar_x0 = np.array([a[k] for k in range(n)])
    return bar_x0, bar_u_np


def adjoint(model, grid, u, double gamma, substeps, states, p_terminal):
    cdef Model M
    _load(&M, model, gamma)
    cdef double[::1] tg = np.ascontiguousarray(grid, dtype=np.float64)
    cdef double[:, ::1] uv = np.ascontiguousarray(np.asarray(u, dtype=np.float64).reshape(tg.shape[0], -1))
    cdef double[:, ::1] st = np.ascontiguousarray(states, dtype=np.float64)
    cdef long long[::1] subs = np.ascontiguousarray(substeps, dtype=np.int64)
    cdef Py_ssize_t N = tg.shape[0] - 1
    cdef int n = M.n, mu = M.m
    p_np = np.empty((N + 1, n))
    cdef double[:, ::1] po = p_np
    cdef double p[MAXN]
    cdef int k
    for k in range(n):
        p[k] = p_terminal[k]
        po[N, k] = p[k]
    cdef long mmax = 1
    cdef Py_ssize_t i
    for i in range(N):
        if subs[i] > mmax:
            mmax = subs[i]
    cdef double* ys = <double*>malloc((mmax + 1) * n * sizeof(double))
    if ys == NULL:
        raise MemoryError()
    cdef long m, s
    cdef double t_i, h, hs, tau
    cdef double u0[MAXM]
    cdef double um[MAXM]
    cdef double u1[MAXM]
    cdef double F0[MAXN]
    cdef double F1[MAXN]
    cdef double ym[MAXN]
    cdef double q[MAXN]
    cdef double g1[MAXN]
    cdef double g2[MAXN]
    cdef double g3[MAXN]
    cdef double g4[MAXN]
    cdef double gu[MAXM]
    cdef double* y0
    cdef double* y1
    cdef Pen P
    try:
        with nogil:
            for i in range(N - 1, -1, -1):
                t_i = tg[i]
                h = tg[i + 1] - t_i
                m = subs[i]
                hs = h / m
                _fill_substeps(&M, t_i, h, m, &st[i, 0], &uv[i, 0], &uv[i + 1, 0], ys)
                for s in range(m - 1, -1, -1):
                    tau = t_i + s * hs
                    _lerp(&uv[i, 0], &uv[i + 1, 0], <double>s / m, mu, u0)
                    _lerp(&uv[i, 0], &uv[i + 1, 0], (s + 0.5) / m, mu, um)
                    _lerp(&uv[i, 0], &uv[i + 1, 0], (s + 1.0) / m, mu, u1)
                    y0 = &ys[s * n]
                    y1 = &ys[(s + 1) * n]
                    _rhs(&M, tau, y0, u0, F0, &P)
                    _rhs(&M, tau + hs, y1, u1, F1, &P)
                    for k in range(n):
                        ym[k] = 0.5 * (y0[k] + y1[k]) + (hs / 8.0) * (F0[k] - F1[k])
                    _jt(&M, y1, p, g1, gu)
                    for k in range(n):
                        g1[k] = -g1[k]
                        q[k] = p[k] - 0.5 * hs * g1[k]
                    _jt(&M, ym, q, g2, gu)
                    for k in range(n):
                        g2[k] = -g2[k]
                        q[k] = p[k] - 0.5 * hs * g2[k]
                    _jt(&M, ym, q, g3, gu)
                    for k in range(n):
                        g3[k] = -g3[k]
                        q[k] = p[k] - hs * g3[k]
                    _jt(&M, y0, q, g4, gu)
                    for k in range(n):
                        g4[k] = -g4[k]
                        p[k] = p[k] - (hs / 6.0) * (g1[k] + 2.0 * g2[k] + 2.0 * g3[k] + g4[k])
                for k in range(n):
                    po[i, k] = p[k]
    finally:
        free(ys)
    return p_np
