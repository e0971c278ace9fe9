"""Linearised Euler-Lagrange flow, conjugate points and second variation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh
from scipy.optimize import brentq, minimize_scalar

from .flow import OrbitSample, integrate_el, residual_jacobian
from .loops import CLOSED, FreeTimeLoop, _coeffs
from .systems import FourierLagrangian, InvalidInputError, TorusManifold

RANK_TOL = 1e-7


@dataclass
class Monodromy:
    """Linearised flow along an orbit.

    ``phis[i]`` maps an initial variation ``(dx0, dv0)`` to the variation at
    ``t[i]``.  Position variations are the horizontal part and velocity
    variations the vertical part, so the vertical-to-horizontal block is
    ``phis[:, :d, d:]``.
    """

    L: object
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    phis: np.ndarray

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def block(self, i):
        """Vertical-to-horizontal block at sample ``i``."""
        d = self.dim
        return self.phis[i, :d, d:]

    def state_at(self, t):
        """(x, v, Phi) at an arbitrary time, by one short RK4 step from the grid."""
        i = int(np.clip(np.searchsorted(self.t, t, side="right") - 1, 0, len(self.t) - 1))
        tau = float(t - self.t[i])
        if abs(tau) < 1e-15:
            return self.x[i], self.v[i], self.phis[i]
        o = integrate_el(self.L, self.x[i], self.v[i], abs(tau), abs(tau), variational=True)
        return o.x[-1], o.v[-1], o.phis[-1] @ self.phis[i]

    def block_at(self, t):
        d = self.dim
        return self.state_at(t)[2][:d, d:]

    def det_at(self, t) -> float:
        return float(np.linalg.det(self.block_at(t)))

    def sigma_at(self, t) -> np.ndarray:
        return np.linalg.svd(self.block_at(t), compute_uv=False)


def linearized_flow(L, orbit_or_x0, v0=None, t_span=None, dt=1e-3) -> Monodromy:
    """Propagate the variational equation along an orbit.

    Pass either an :class:`~freeloop.flow.OrbitSample` (its initial state,
    span and step are reused) or ``x0, v0, t_span``.
    """
    if isinstance(orbit_or_x0, OrbitSample):
        o = orbit_or_x0
        x0, v0 = o.x[0], o.v[0]
        span, dt = float(o.t[-1] - o.t[0]), o.dt
    else:
        if v0 is None or t_span is None:
            raise InvalidInputError("need v0 and t_span with an initial point")
        x0, span = orbit_or_x0, float(t_span)
    orb = integrate_el(L, x0, v0, span, dt, variational=True)
    return Monodromy(L, orb.t - orb.t[0], orb.x, orb.v, orb.phis)


@dataclass
class ConjugatePoint:
    t: float
    multiplicity: int
    kind: str  # "sign-change" or "rank-gap"
    sigma_min: float


@dataclass
class ConjugateReport:
    points: list = field(default_factory=list)
    det: np.ndarray | None = None
    t: np.ndarray | None = None
    scale: float = 1.0

    @property
    def times(self) -> list:
        return [p.t for p in self.points]

    @property
    def found(self) -> bool:
        return bool(self.points)


def conjugate_scan(mono: Monodromy, tol=1e-8, rank_tol=RANK_TOL, t_min=None) -> ConjugateReport:
    """Locate zeros of det of the vertical-to-horizontal block.

    Sign changes of the determinant are bracketed on the sample grid and
    refined with Brent's method to ``tol``.  Even-order zeros (no sign
    change) are caught as local minima of the smallest singular value that
    drop below ``rank_tol`` times the largest singular value seen along the
    scan.  Multiplicity is the numerical rank deficiency at the zero.
    """
    t = mono.t
    d = mono.dim
    n = len(t)
    if n < 3:
        return ConjugateReport([], None, t)
    blocks = mono.phis[:, :d, d:]
    det = np.linalg.det(blocks)
    sig = np.linalg.svd(blocks, compute_uv=False)
    scale = float(np.max(sig[:, 0])) or 1.0
    smin = sig[:, -1]
    # the block vanishes like t**d at the start; skip that trivial zero
    if t_min is None:
        t_min = 10.0 * mono.t[1] if n > 1 else 0.0
    start = int(np.searchsorted(t, t_min))
    start = max(start, 1)

    points = []

    def multiplicity(tc):
        s = mono.sigma_at(tc)
        return int(np.sum(s <= rank_tol * scale)), float(s[-1])

    for i in range(start, n - 1):
        if det[i] == 0.0:
            tc = t[i]
        elif det[i] * det[i + 1] < 0:
            tc = brentq(mono.det_at, t[i], t[i + 1], xtol=tol, rtol=4 * np.finfo(float).eps)
        else:
            continue
        m, s = multiplicity(tc)
        points.append(ConjugatePoint(float(tc), max(m, 1), "sign-change", s))

    for i in range(max(start, 1), n - 1):
        if not (smin[i] <= smin[i - 1] and smin[i] <= smin[i + 1]):
            continue
        if any(abs(p.t - t[i]) <= 2 * (t[1] - t[0]) for p in points):
            continue
        res = minimize_scalar(
            lambda s: mono.sigma_at(s)[-1], bounds=(t[i - 1], t[i + 1]), method="bounded", options={"xatol": tol}
        )
        if res.fun <= rank_tol * scale:
            m, s = multiplicity(res.x)
            points.append(ConjugatePoint(float(res.x), max(m, 1), "rank-gap", s))

    points.sort(key=lambda p: p.t)
    return ConjugateReport(points, det, t, scale)


# ---------------------------------------------------------------- second variation


def metric_matrix(loop: FreeTimeLoop, metric="weighted") -> np.ndarray:
    """Dense Gram matrix of the loop metric in :func:`~freeloop.loops.pack` coordinates."""
    wT, f, g, m = _coeffs(metric, loop.T)
    N, d = loop.N, loop.dim
    if loop.mode == CLOSED:
        n = N
        A = np.diag(np.full(n, 2 * g * N + m / N))
        A[0, 0] += f
        idx = np.arange(n)
        A[idx, (idx + 1) % n] -= g * N
        A[(idx + 1) % n, idx] -= g * N
    else:
        n = N - 1
        A = np.diag(np.full(n, 2 * g * N + m / N))
        idx = np.arange(n - 1)
        A[idx, idx + 1] = -g * N
        A[idx + 1, idx] = -g * N
    G = np.zeros((n * d + 1, n * d + 1))
    G[:-1, :-1] = np.kron(A, np.eye(d))
    G[-1, -1] = wT
    return G


def discrete_hessian(L, k, loop: FreeTimeLoop, h=1e-5, return_asymmetry=False):
    """Symmetrised central-difference Hessian of the discrete action."""
    H = residual_jacobian(L, loop, k, h=h)
    asym = float(np.linalg.norm(H - H.T) / max(np.linalg.norm(H), 1e-300))
    Hs = 0.5 * (H + H.T)
    return (Hs, asym) if return_asymmetry else Hs


def _time_shift_vector(loop: FreeTimeLoop):
    nodes = loop.nodes
    if loop.mode == CLOSED:
        core = nodes[:-1]
        tang = 0.5 * (np.roll(core, -1, axis=0) - np.roll(core, 1, axis=0))
        # roll wraps across the lift seam; undo the integer jump
        jump = nodes[-1] - nodes[0]
        tang[-1] += 0.5 * jump
        tang[0] += 0.5 * jump
    else:
        tang = 0.5 * (nodes[2:] - nodes[:-2])
    return np.concatenate([tang.ravel(), [0.0]])


def hessian_spectrum(L, k, loop: FreeTimeLoop, m=1, metric="weighted", h=1e-5, return_info=False):
    """Smallest ``m`` eigenvalues of the second variation in the loop metric.

    Solves ``H v = lam G v`` with ``H`` the symmetrised finite-difference
    Hessian and ``G`` the loop-metric Gram matrix.  For closed loops the
    eigenvector that best matches a shift of the time origin is removed.
    A relative asymmetry of ``H`` above 1e-4 raises a warning.
    """
    H, asym = discrete_hessian(L, k, loop, h=h, return_asymmetry=True)
    if asym > 1e-4:
        warnings.warn(f"finite-difference Hessian asymmetry {asym:.2e}", RuntimeWarning, stacklevel=2)
    G = metric_matrix(loop, metric)
    lam, vec = eigh(H, G)
    excluded = None
    if loop.mode == CLOSED:
        w = _time_shift_vector(loop)
        nw = np.sqrt(w @ G @ w)
        if nw > 0:
            overlap = np.abs(vec.T @ G @ w) / nw  # eigh returns G-orthonormal vectors
            j = int(np.argmax(overlap))
            if overlap[j] > 0.5:
                excluded = j
    keep = [i for i in range(lam.size) if i != excluded]
    vals = lam[keep][:m]
    if return_info:
        info = {
            "asymmetry": asym,
            "excluded": None if excluded is None else float(lam[excluded]),
            "eigenvalues": lam,
            "eigenvectors": vec,
        }
        return vals, info
    return vals


# ---------------------------------------------------------------- Jacobi-field bound


@dataclass
class JacobiBound:
    K: float
    violations: int
    trials: int
    ratios: np.ndarray


def _jacobi_ratio(L, man, x0, v0, J0, J1, steps):
    d = man.dim
    mono = linearized_flow(L, x0, v0, 1.0, 1.0 / steps)
    P = mono.phis[-1]
    Axx, Axv = P[:d, :d], P[:d, d:]
    dJ0 = np.linalg.solve(Axv, J1 - Axx @ J0)
    z = mono.phis @ np.concatenate([J0, dJ0])  # (n, 2d)
    J, dJ = z[:, :d], z[:, d:]
    x, v = mono.x, mono.v
    gam = man.christoffel(x)
    # covariant derivative along the geodesic
    DJ = dJ + np.einsum("nkij,ni,nj->nk", gam, v, J)
    conf = np.exp(man.conformal.value(x))
    nrm = lambda w: conf * np.linalg.norm(w, axis=1)  # noqa: E731
    # Jacobi equation: D^2 J = -R(J, v) v, so |D^2 J| = |K| |v|^2 |J_perp| in 2D
    K = man.gaussian_curvature(x)
    v2 = conf**2 * np.einsum("ni,ni->n", v, v)
    Jv = conf**2 * np.einsum("ni,ni->n", J, v)
    Jperp2 = np.maximum(nrm(J) ** 2 - np.where(v2 > 0, Jv**2 / np.where(v2 > 0, v2, 1), 0.0), 0.0)
    D2 = np.abs(K) * v2 * np.sqrt(Jperp2)
    bound = conf[0] * np.linalg.norm(J0) + conf[-1] * np.linalg.norm(J1)
    top = max(nrm(J).max(), nrm(DJ).max(), D2.max())
    return top / bound if bound > 0 else 0.0


def jacobi_bound_check(manifold: TorusManifold, trials=200, seed=0, steps=200) -> JacobiBound:
    """Empirical constant in |J|, |J'|, |J''| <= K (|J(0)| + |J(1)|).

    Samples unit-interval geodesics of speed at most 1 with random boundary
    data and reports the largest ratio.  A trial counts as a violation when
    rerunning it with half the step size gives a ratio above 1.01 K.
    """
    if manifold.dim != 2:
        raise InvalidInputError("jacobi_bound_check is two-dimensional")
    L = FourierLagrangian(manifold, name="geodesic")
    rng = np.random.default_rng(seed)
    ratios = np.empty(trials)
    cases = []
    for i in range(trials):
        x0 = rng.random(2)
        ang = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.0, 1.0)
        v0 = speed * np.exp(-manifold.conformal.value(x0[None])[0]) * np.array([np.cos(ang), np.sin(ang)])
        J0, J1 = rng.normal(size=2), rng.normal(size=2)
        cases.append((x0, v0, J0, J1))
        ratios[i] = _jacobi_ratio(L, manifold, x0, v0, J0, J1, steps)
    K = float(ratios.max())
    violations = sum(_jacobi_ratio(L, manifold, *c, 2 * steps) > 1.01 * K for c in cases)
    return JacobiBound(K, int(violations), trials, ratios)
