"""Pure numpy/scipy implementations of the hot kernels.

Each function here has a compiled twin in ``_kernels.pyx`` with the same
signature; :mod:`freeloop.kernels` picks one at import time.
"""

import numpy as np
from scipy.linalg import solve_banded

TWO_PI = 2.0 * np.pi


def _fields(tab, x):
    """u, grad u, hess u, psi, grad psi, hess psi, A, JA, dJA at points x (n, d)."""
    d = x.shape[1]
    n = x.shape[0]

    def scalar(waves, cc, ss, const):
        if waves.shape[0] == 0:
            return np.full(n, const), np.zeros((n, d)), np.zeros((n, d, d))
        ph = TWO_PI * (x @ waves.T)
        c, s = np.cos(ph), np.sin(ph)
        val = const + c @ cc + s @ ss
        g = TWO_PI * ((-s * cc + c * ss) @ waves)
        h = -(TWO_PI**2) * np.einsum("nm,mi,mj->nij", c * cc + s * ss, waves, waves)
        return val, g, h

    u, gu, hu = scalar(tab.u_waves, tab.u_cos, tab.u_sin, tab.u_const)
    p, gp, hp = scalar(tab.p_waves, tab.p_cos, tab.p_sin, tab.p_const)
    if tab.a_waves.shape[0] == 0:
        A = np.tile(tab.a_const, (n, 1))
        JA = np.zeros((n, d, d))
        dJA = np.zeros((n, d, d, d))
    else:
        ph = TWO_PI * (x @ tab.a_waves.T)
        c, s = np.cos(ph), np.sin(ph)
        A = tab.a_const + c @ tab.a_cos + s @ tab.a_sin
        coef1 = -s[:, :, None] * tab.a_cos + c[:, :, None] * tab.a_sin  # (n, m, i)
        JA = TWO_PI * np.einsum("nmi,mj->nij", coef1, tab.a_waves)
        coef2 = c[:, :, None] * tab.a_cos + s[:, :, None] * tab.a_sin
        # dJA[n, i, j, m] = d^2 A_i / dx_j dx_m
        dJA = -(TWO_PI**2) * np.einsum("nki,kj,km->nijm", coef2, tab.a_waves, tab.a_waves)
    return u, gu, hu, p, gp, hp, A, JA, dJA


def _blend(s, R, W):
    t = np.clip((s - R) / W, 0.0, 1.0)
    chi = 1.0 - 3.0 * t**2 + 2.0 * t**3
    inside = (t > 0.0) & (t < 1.0)
    dchi = np.where(inside, (-6.0 * t + 6.0 * t**2) / W, 0.0)
    return chi, dchi


def loop_action(tab, nodes, T, k):
    """Midpoint-rule discrete action and its gradient.

    Returns ``(S, dS/dnodes, dS/dT, E_seg, L_seg)``.
    """
    N = nodes.shape[0] - 1
    dx = np.diff(nodes, axis=0)
    m = 0.5 * (nodes[:-1] + nodes[1:])
    v = dx * (N / T)
    u, gu, _, psi, gpsi, _, A, JA, _ = _fields(tab, m)
    n = np.exp(2.0 * u)
    v2 = np.einsum("ni,ni->n", v, v)
    s = np.sqrt(n * v2)
    chi, dchi = _blend(s, tab.R, tab.W)
    P = psi - np.einsum("ni,ni->n", A, v)
    safe = np.where(s > 0, s, 1.0)
    dsdv = (n / safe)[:, None] * v
    dPdx = gpsi - np.einsum("ni,nij->nj", v, JA)
    L = 0.5 * n * v2 + chi * P
    Lv = n[:, None] * v + (dchi * P)[:, None] * dsdv - chi[:, None] * A
    Lx = (n * v2 + dchi * P * s)[:, None] * gu + chi[:, None] * dPdx
    E = np.einsum("ni,ni->n", v, Lv) - L
    h = T / N
    S = h * float(np.sum(L + k))
    grad = np.zeros_like(nodes)
    half = 0.5 * h * Lx
    grad[:-1] += half - Lv
    grad[1:] += half + Lv
    dT = float(np.mean(k - E))
    return S, grad, dT, E, L


def tridiag_solve(sub, diag, sup, rhs):
    """Solve a tridiagonal system; sub[i] = A[i, i-1], sup[i] = A[i, i+1]."""
    n = diag.shape[0]
    ab = np.zeros((3, n))
    ab[0, 1:] = sup[:-1]
    ab[1] = diag
    ab[2, :-1] = sub[1:]
    return solve_banded((1, 1), ab, rhs)


def cyclic_tridiag_solve(sub, diag, sup, rhs):
    """Cyclic tridiagonal solve by Sherman-Morrison.

    Corners: ``A[0, n-1] = sub[0]`` and ``A[n-1, 0] = sup[n-1]``.
    """
    n = diag.shape[0]
    alpha = sup[n - 1]
    beta = sub[0]
    gamma = -diag[0]
    bb = diag.copy()
    bb[0] = diag[0] - gamma
    bb[n - 1] = diag[n - 1] - alpha * beta / gamma
    u = np.zeros(n)
    u[0] = gamma
    u[n - 1] = alpha
    rhs2 = rhs if rhs.ndim == 2 else rhs[:, None]
    both = np.concatenate([rhs2, u[:, None]], axis=1)
    sol = tridiag_solve(sub, bb, sup, both)
    y, z = sol[:, :-1], sol[:, -1]
    fact = (y[0] + beta * y[n - 1] / gamma) / (1.0 + z[0] + beta * z[n - 1] / gamma)
    x = y - np.outer(z, fact)
    return x if rhs.ndim == 2 else x[:, 0]


def accel_jac(tab, x, v, want_jac=True):
    """EL acceleration (core region) and its Jacobian blocks for one point."""
    xs = x[None, :]
    u, gu, hu, _, gp, hp, A, JA, dJA = _fields(tab, xs)
    u, gu, hu, gp, hp, JA, dJA = u[0], gu[0], hu[0], gp[0], hp[0], JA[0], dJA[0]
    ninv = np.exp(-2.0 * u)
    v2 = v @ v
    guv = gu @ v
    Fm = JA - JA.T
    Fv = Fm @ v
    a = v2 * gu - 2.0 * guv * v + ninv * (Fv + gp)
    if not want_jac:
        return a, None, None
    d = x.shape[0]
    eye = np.eye(d)
    da_dv = 2.0 * np.outer(gu, v) - 2.0 * np.outer(v, gu) - 2.0 * guv * eye + ninv * Fm
    dF = dJA - np.transpose(dJA, (1, 0, 2))  # dF[i, j, m] = d/dx_m F_ij
    hv = hu @ v
    da_dx = (
        v2 * hu
        - 2.0 * np.outer(v, hv)
        + ninv * np.einsum("ijm,j->im", dF, v)
        - 2.0 * ninv * np.outer(Fv + gp, gu)
        + ninv * hp
    )
    return a, da_dx, da_dv


def speed_ratio(tab, x, v):
    u = _fields(tab, x[None, :])[0][0]
    return np.sqrt(np.exp(2.0 * u) * (v @ v)) / tab.R


def el_rk4(tab, x0, v0, dt, nsteps, variational):
    """Classical RK4 on the EL system, optionally with the variational flow.

    Returns ``(xs, vs, phis, count)`` where ``count`` is the number of valid
    samples; it is short of ``nsteps + 1`` when the orbit left the region
    |v|_x < R where the closed-form acceleration applies, or blew up.
    """
    d = x0.shape[0]
    xs = np.empty((nsteps + 1, d))
    vs = np.empty((nsteps + 1, d))
    phis = np.empty((nsteps + 1, 2 * d, 2 * d)) if variational else None
    x, v = x0.astype(float).copy(), v0.astype(float).copy()
    phi = np.eye(2 * d)
    xs[0], vs[0] = x, v
    if variational:
        phis[0] = phi

    def rhs(x, v, phi):
        a, ax, av = accel_jac(tab, x, v, variational)
        if not variational:
            return v, a, None
        J = np.zeros((2 * d, 2 * d))
        J[:d, d:] = np.eye(d)
        J[d:, :d] = ax
        J[d:, d:] = av
        return v, a, J @ phi

    for i in range(nsteps):
        if speed_ratio(tab, x, v) >= 1.0:
            return xs, vs, phis, i + 1
        k1x, k1v, k1p = rhs(x, v, phi)
        k2x, k2v, k2p = rhs(x + 0.5 * dt * k1x, v + 0.5 * dt * k1v, None if k1p is None else phi + 0.5 * dt * k1p)
        k3x, k3v, k3p = rhs(x + 0.5 * dt * k2x, v + 0.5 * dt * k2v, None if k2p is None else phi + 0.5 * dt * k2p)
        k4x, k4v, k4p = rhs(x + dt * k3x, v + dt * k3v, None if k3p is None else phi + dt * k3p)
        x = x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        v = v + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        if variational:
            phi = phi + dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
            phis[i + 1] = phi
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            return xs, vs, phis, i + 1
        xs[i + 1], vs[i + 1] = x, v
    return xs, vs, phis, nsteps + 1
