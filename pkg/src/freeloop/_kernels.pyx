# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: discrete action, tridiagonal solves, EL/variational RK4.

Mirrors ``_fallback.py`` function for function.  Fourier tables are passed
unpacked (see ``KernelTables.args``).  Dimension is limited to ``MAXD``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, exp, sqrt, M_PI

cnp.import_array()

DEF MAXD = 8
cdef double TWO_PI = 2.0 * M_PI

MAX_DIM = MAXD


cdef struct Fields:
    double u
    double gu[MAXD]
    double hu[MAXD][MAXD]
    double p
    double gp[MAXD]
    double hp[MAXD][MAXD]
    double A[MAXD]
    double JA[MAXD][MAXD]
    double dJA[MAXD][MAXD][MAXD]


cdef inline void scalar_field(const double* x, int d, const double[:, ::1] waves,
                              const double[::1] cc, const double[::1] ss, double const,
                              double* val, double* g, double (*h)[MAXD], bint second) nogil:
    cdef int m, i, j
    cdef double ph, c, s, w1, w2
    val[0] = const
    for i in range(d):
        g[i] = 0.0
        if second:
            for j in range(d):
                h[i][j] = 0.0
    for m in range(waves.shape[0]):
        ph = 0.0
        for i in range(d):
            ph += waves[m, i] * x[i]
        ph *= TWO_PI
        c = cos(ph)
        s = sin(ph)
        val[0] += c * cc[m] + s * ss[m]
        w1 = TWO_PI * (-s * cc[m] + c * ss[m])
        for i in range(d):
            g[i] += w1 * waves[m, i]
        if second:
            w2 = -TWO_PI * TWO_PI * (c * cc[m] + s * ss[m])
            for i in range(d):
                for j in range(d):
                    h[i][j] += w2 * waves[m, i] * waves[m, j]


cdef void eval_fields(Fields* f, const double* x, int d,
                      const double[:, ::1] u_waves, const double[::1] u_cos, const double[::1] u_sin, double u_const,
                      const double[:, ::1] p_waves, const double[::1] p_cos, const double[::1] p_sin, double p_const,
                      const double[:, ::1] a_waves, const double[:, ::1] a_cos, const double[:, ::1] a_sin,
                      const double[::1] a_const, bint second) nogil:
    cdef int m, i, j, l
    cdef double ph, c, s, w1, w2
    scalar_field(x, d, u_waves, u_cos, u_sin, u_const, &f.u, f.gu, f.hu, second)
    scalar_field(x, d, p_waves, p_cos, p_sin, p_const, &f.p, f.gp, f.hp, second)
    for i in range(d):
        f.A[i] = a_const[i]
        for j in range(d):
            f.JA[i][j] = 0.0
            if second:
                for l in range(d):
                    f.dJA[i][j][l] = 0.0
    for m in range(a_waves.shape[0]):
        ph = 0.0
        for i in range(d):
            ph += a_waves[m, i] * x[i]
        ph *= TWO_PI
        c = cos(ph)
        s = sin(ph)
        for i in range(d):
            f.A[i] += c * a_cos[m, i] + s * a_sin[m, i]
            w1 = TWO_PI * (-s * a_cos[m, i] + c * a_sin[m, i])
            for j in range(d):
                f.JA[i][j] += w1 * a_waves[m, j]
            if second:
                w2 = -TWO_PI * TWO_PI * (c * a_cos[m, i] + s * a_sin[m, i])
                for j in range(d):
                    for l in range(d):
                        f.dJA[i][j][l] += w2 * a_waves[m, j] * a_waves[m, l]


def loop_action(const double[:, ::1] u_waves, const double[::1] u_cos, const double[::1] u_sin, double u_const,
                const double[:, ::1] p_waves, const double[::1] p_cos, const double[::1] p_sin, double p_const,
                const double[:, ::1] a_waves, const double[:, ::1] a_cos, const double[:, ::1] a_sin,
                const double[::1] a_const, double R, double W,
                const double[:, ::1] nodes, double T, double k):
    cdef int N = nodes.shape[0] - 1
    cdef int d = nodes.shape[1]
    cdef int i, j, l
    cdef Fields f
    cdef double m[MAXD]
    cdef double v[MAXD]
    cdef double Lv[MAXD]
    cdef double Lx[MAXD]
    cdef double n, v2, s, t, chi, dchi, P, Av, dPdx, L, E, h, S, sumE
    if d > MAXD:
        raise ValueError("dimension too large for compiled kernel")
    grad_arr = np.zeros((N + 1, d))
    E_arr = np.empty(N)
    L_arr = np.empty(N)
    cdef double[:, ::1] grad = grad_arr
    cdef double[::1] Es = E_arr
    cdef double[::1] Ls = L_arr
    h = T / N
    S = 0.0
    sumE = 0.0
    with nogil:
        for i in range(N):
            for j in range(d):
                m[j] = 0.5 * (nodes[i, j] + nodes[i + 1, j])
                v[j] = (nodes[i + 1, j] - nodes[i, j]) * (N / T)
            eval_fields(&f, m, d, u_waves, u_cos, u_sin, u_const, p_waves, p_cos, p_sin, p_const,
                        a_waves, a_cos, a_sin, a_const, False)
            n = exp(2.0 * f.u)
            v2 = 0.0
            Av = 0.0
            for j in range(d):
                v2 += v[j] * v[j]
                Av += f.A[j] * v[j]
            s = sqrt(n * v2)
            t = (s - R) / W
            if t <= 0.0:
                chi = 1.0
                dchi = 0.0
            elif t >= 1.0:
                chi = 0.0
                dchi = 0.0
            else:
                chi = 1.0 - 3.0 * t * t + 2.0 * t * t * t
                dchi = (-6.0 * t + 6.0 * t * t) / W
            P = f.p - Av
            L = 0.5 * n * v2 + chi * P
            E = -L
            for j in range(d):
                Lv[j] = n * v[j] - chi * f.A[j]
                if dchi != 0.0:
                    Lv[j] += dchi * P * n * v[j] / s
                E += v[j] * Lv[j]
            for j in range(d):
                dPdx = f.gp[j]
                for l in range(d):
                    dPdx -= v[l] * f.JA[l][j]
                Lx[j] = (n * v2 + dchi * P * s) * f.gu[j] + chi * dPdx
                grad[i, j] += 0.5 * h * Lx[j] - Lv[j]
                grad[i + 1, j] += 0.5 * h * Lx[j] + Lv[j]
            Es[i] = E
            Ls[i] = L
            S += h * (L + k)
            sumE += E
    return S, grad_arr, k - sumE / N, E_arr, L_arr


def tridiag_solve(const double[::1] sub, const double[::1] diag, const double[::1] sup, rhs_in):
    rhs = np.ascontiguousarray(rhs_in, dtype=float)
    vec = rhs.ndim == 1
    if vec:
        rhs = rhs[:, None].copy()
    out_arr = rhs.copy()
    cdef double[:, ::1] x = out_arr
    cdef int n = diag.shape[0]
    cdef int mcols = x.shape[1]
    cdef int i, c
    cdef double w
    cp_arr = np.empty(n)
    cdef double[::1] cp = cp_arr
    with nogil:
        cp[0] = sup[0] / diag[0]
        for c in range(mcols):
            x[0, c] = x[0, c] / diag[0]
        for i in range(1, n):
            w = diag[i] - sub[i] * cp[i - 1]
            if i < n - 1:
                cp[i] = sup[i] / w
            for c in range(mcols):
                x[i, c] = (x[i, c] - sub[i] * x[i - 1, c]) / w
        for i in range(n - 2, -1, -1):
            for c in range(mcols):
                x[i, c] = x[i, c] - cp[i] * x[i + 1, c]
    return out_arr[:, 0] if vec else out_arr


def cyclic_tridiag_solve(const double[::1] sub, const double[::1] diag, const double[::1] sup, rhs_in):
    rhs = np.ascontiguousarray(rhs_in, dtype=float)
    vec = rhs.ndim == 1
    if vec:
        rhs = rhs[:, None]
    cdef int n = diag.shape[0]
    cdef double alpha = sup[n - 1]
    cdef double beta = sub[0]
    cdef double gamma = -diag[0]
    bb = np.array(diag, dtype=float)
    bb[0] = diag[0] - gamma
    bb[n - 1] = diag[n - 1] - alpha * beta / gamma
    both = np.empty((n, rhs.shape[1] + 1))
    both[:, :-1] = rhs
    both[:, -1] = 0.0
    both[0, -1] = gamma
    both[n - 1, -1] = alpha
    sol = tridiag_solve(sub, bb, sup, both)
    y = sol[:, :-1]
    z = sol[:, -1]
    fact = (y[0] + beta * y[n - 1] / gamma) / (1.0 + z[0] + beta * z[n - 1] / gamma)
    out = y - np.outer(z, fact)
    return out[:, 0] if vec else out


cdef void accel(const double* x, const double* v, int d, bint jac, double* a,
                double (*ax)[MAXD], double (*av)[MAXD], double* sratio,
                const double[:, ::1] u_waves, const double[::1] u_cos, const double[::1] u_sin, double u_const,
                const double[:, ::1] p_waves, const double[::1] p_cos, const double[::1] p_sin, double p_const,
                const double[:, ::1] a_waves, const double[:, ::1] a_cos, const double[:, ::1] a_sin,
                const double[::1] a_const, double R) nogil:
    cdef Fields f
    cdef int i, j, l
    cdef double ninv, v2, guv, Fv[MAXD], hv[MAXD], dFv
    eval_fields(&f, x, d, u_waves, u_cos, u_sin, u_const, p_waves, p_cos, p_sin, p_const,
                a_waves, a_cos, a_sin, a_const, jac)
    ninv = exp(-2.0 * f.u)
    v2 = 0.0
    guv = 0.0
    for i in range(d):
        v2 += v[i] * v[i]
        guv += f.gu[i] * v[i]
    sratio[0] = sqrt(v2 / ninv) / R
    for i in range(d):
        Fv[i] = 0.0
        for j in range(d):
            Fv[i] += (f.JA[i][j] - f.JA[j][i]) * v[j]
        a[i] = v2 * f.gu[i] - 2.0 * guv * v[i] + ninv * (Fv[i] + f.gp[i])
    if not jac:
        return
    for i in range(d):
        hv[i] = 0.0
        for j in range(d):
            hv[i] += f.hu[i][j] * v[j]
    for i in range(d):
        for l in range(d):
            av[i][l] = 2.0 * f.gu[i] * v[l] - 2.0 * v[i] * f.gu[l] + ninv * (f.JA[i][l] - f.JA[l][i])
            if i == l:
                av[i][l] -= 2.0 * guv
            dFv = 0.0
            for j in range(d):
                dFv += (f.dJA[i][j][l] - f.dJA[j][i][l]) * v[j]
            ax[i][l] = (v2 * f.hu[i][l] - 2.0 * v[i] * hv[l] + ninv * dFv
                        - 2.0 * ninv * (Fv[i] + f.gp[i]) * f.gu[l] + ninv * f.hp[i][l])


def el_rk4(const double[:, ::1] u_waves, const double[::1] u_cos, const double[::1] u_sin, double u_const,
           const double[:, ::1] p_waves, const double[::1] p_cos, const double[::1] p_sin, double p_const,
           const double[:, ::1] a_waves, const double[:, ::1] a_cos, const double[:, ::1] a_sin,
           const double[::1] a_const, double R, double W,
           x0_in, v0_in, double dt, int nsteps, bint variational):
    cdef int d = len(x0_in)
    if d > MAXD:
        raise ValueError("dimension too large for compiled kernel")
    cdef int D = 2 * d
    xs_arr = np.empty((nsteps + 1, d))
    vs_arr = np.empty((nsteps + 1, d))
    phis_arr = np.empty((nsteps + 1, D, D)) if variational else np.empty((1, D, D))
    cdef double[:, ::1] xs = xs_arr
    cdef double[:, ::1] vs = vs_arr
    cdef double[:, :, ::1] phis = phis_arr
    cdef double x[MAXD]
    cdef double v[MAXD]
    cdef double xt[MAXD]
    cdef double vt[MAXD]
    cdef double kx[4][MAXD]
    cdef double kv[4][MAXD]
    cdef double ax[MAXD][MAXD]
    cdef double av[MAXD][MAXD]
    cdef double phi[2 * MAXD][2 * MAXD]
    cdef double pt[2 * MAXD][2 * MAXD]
    cdef double kp[4][2 * MAXD][2 * MAXD]
    cdef double a[MAXD]
    cdef double sr
    cdef double coef[4]
    cdef int i, j, l, c, st, count
    cdef bint bad
    coef[0] = 0.0
    coef[1] = 0.5
    coef[2] = 0.5
    coef[3] = 1.0
    for j in range(d):
        x[j] = x0_in[j]
        v[j] = v0_in[j]
        xs[0, j] = x[j]
        vs[0, j] = v[j]
    for j in range(D):
        for l in range(D):
            phi[j][l] = 1.0 if j == l else 0.0
            if variational:
                phis[0, j, l] = phi[j][l]
    count = nsteps + 1
    with nogil:
        for i in range(nsteps):
            accel(x, v, d, False, a, ax, av, &sr, u_waves, u_cos, u_sin, u_const,
                  p_waves, p_cos, p_sin, p_const, a_waves, a_cos, a_sin, a_const, R)
            if sr >= 1.0:
                count = i + 1
                break
            for st in range(4):
                for j in range(d):
                    if st == 0:
                        xt[j] = x[j]
                        vt[j] = v[j]
                    else:
                        xt[j] = x[j] + coef[st] * dt * kx[st - 1][j]
                        vt[j] = v[j] + coef[st] * dt * kv[st - 1][j]
                accel(xt, vt, d, variational, a, ax, av, &sr, u_waves, u_cos, u_sin, u_const,
                      p_waves, p_cos, p_sin, p_const, a_waves, a_cos, a_sin, a_const, R)
                for j in range(d):
                    kx[st][j] = vt[j]
                    kv[st][j] = a[j]
                if variational:
                    for j in range(D):
                        for l in range(D):
                            if st == 0:
                                pt[j][l] = phi[j][l]
                            else:
                                pt[j][l] = phi[j][l] + coef[st] * dt * kp[st - 1][j][l]
                    # d(phi)/dt = [[0, I], [ax, av]] phi
                    for l in range(D):
                        for j in range(d):
                            kp[st][j][l] = pt[d + j][l]
                            kp[st][d + j][l] = 0.0
                            for c in range(d):
                                kp[st][d + j][l] += ax[j][c] * pt[c][l] + av[j][c] * pt[d + c][l]
            bad = False
            for j in range(d):
                x[j] += dt / 6.0 * (kx[0][j] + 2.0 * kx[1][j] + 2.0 * kx[2][j] + kx[3][j])
                v[j] += dt / 6.0 * (kv[0][j] + 2.0 * kv[1][j] + 2.0 * kv[2][j] + kv[3][j])
                if not (x[j] == x[j] and v[j] == v[j]) or x[j] > 1e300 or x[j] < -1e300:
                    bad = True
            if variational:
                for j in range(D):
                    for l in range(D):
                        phi[j][l] += dt / 6.0 * (kp[0][j][l] + 2.0 * kp[1][j][l] + 2.0 * kp[2][j][l] + kp[3][j][l])
                        phis[i + 1, j, l] = phi[j][l]
            if bad:
                count = i + 1
                break
            for j in range(d):
                xs[i + 1, j] = x[j]
                vs[i + 1, j] = v[j]
    return xs_arr, vs_arr, (phis_arr if variational else None), count
