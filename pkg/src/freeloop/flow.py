"""Gradient descent of the action, Newton refinement, EL integration and
Palais-Smale failure diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .loops import (
    CLOSED,
    FreeTimeLoop,
    LoopTangent,
    _free_slice,
    _tables,
    d_action,
    discrete_action,
    el_residual,
    metric_dual,
    pack,
    packed_gradient,
    unpack,
)
from .systems import InvalidInputError, NumericError

CONVERGED = "Converged"
T_COLLAPSE = "TCollapse"
T_BLOWUP = "TBlowup"
STALLED = "Stalled"


@dataclass
class DescentOptions:
    """Tolerances for :func:`descend`.

    ``metric`` selects the loop metric used to turn the differential into a
    step direction; ``"capped"`` keeps both weights at min(T**2, 1).
    """

    gtol: float = 1e-8
    max_iter: int = 5000
    T_floor: float = 1e-3
    T_ceiling: float = 1e3
    metric: str = "capped"
    step0: float = 1.0
    step_max: float = 1e6
    armijo: float = 0.5
    shrink: float = 0.5
    grow: float = 2.0
    min_step: float = 1e-14
    band_tol: float = 1e-2
    record_every: int = 1


@dataclass
class DescentState:
    loop: FreeTimeLoop
    action: float
    grad_norm: float
    step: float
    iterations: int
    verdict: str | None = None
    T_history: list = field(default_factory=list)
    action_history: list = field(default_factory=list)
    grad_history: list = field(default_factory=list)
    flow_time: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    k: float = 0.0

    def log_rows(self):
        return list(zip(range(len(self.action_history)), self.action_history, self.grad_history, self.T_history))


class DescentNumericError(NumericError):
    """Non-finite action or gradient; carries the last good state."""

    def __init__(self, msg, state):
        super().__init__(msg)
        self.state = state


class RefineFailed(RuntimeError):
    def __init__(self, msg, loop=None, residuals=None):
        super().__init__(msg)
        self.loop = loop
        self.residuals = residuals


# ledger of runs that hit the collapse floor while their action stayed in a
# band excluding zero; the relative-completeness guard says this is empty
_GUARD_VIOLATIONS: list = []
# how many descents finished, and how many of those collapsed
_GUARD_COUNTS = {"descents": 0, "collapses": 0}


def guard_violations():
    return list(_GUARD_VIOLATIONS)


def guard_counts() -> dict:
    return dict(_GUARD_COUNTS)


def reset_guard():
    _GUARD_VIOLATIONS.clear()
    _GUARD_COUNTS.update(descents=0, collapses=0)


def band_excludes_zero(history, band_tol):
    a = np.asarray(history, float)
    if a.size == 0:
        return False
    return bool(np.all(a > band_tol) or np.all(a < -band_tol))


def _step(loop, t: LoopTangent, step):
    T = loop.T - step * t.alpha
    if not T > 0:
        return None
    return loop.with_nodes(loop.nodes - step * t.xi, T)


def descend(L, k, start: FreeTimeLoop, opts: DescentOptions | None = None) -> DescentState:
    """Armijo backtracking descent along minus the loop-metric gradient.

    Terminates with ``Converged`` (dual gradient norm <= gtol), ``TCollapse``
    (T below the floor), ``TBlowup`` (T above the ceiling) or ``Stalled``.
    Accepted steps satisfy ``A(p2) <= A(p1) - armijo * step * |grad|^2``.
    """
    opts = opts or DescentOptions()
    loop = start
    S, grad, dT, _, _ = discrete_action(L, loop.nodes, loop.T, k)
    state = DescentState(loop, S, math.inf, opts.step0, 0, k=k)
    step = opts.step0
    t_flow = 0.0
    for it in range(opts.max_iter + 1):
        cot = d_action(L, loop, k)
        tan = metric_dual(loop, cot, opts.metric)
        g2 = cot.pair(tan)
        if not (np.isfinite(S) and np.isfinite(g2)):
            raise DescentNumericError(f"non-finite action/gradient at iteration {it}", state)
        gn = math.sqrt(max(g2, 0.0))
        state.loop, state.action, state.grad_norm, state.iterations = loop, S, gn, it
        if it % opts.record_every == 0:
            state.T_history.append(loop.T)
            state.action_history.append(S)
            state.grad_history.append(gn)
            state.flow_time.append(t_flow)
        if loop.T < opts.T_floor:
            state.verdict = T_COLLAPSE
            break
        if loop.T > opts.T_ceiling:
            state.verdict = T_BLOWUP
            break
        if gn <= opts.gtol:
            state.verdict = CONVERGED
            break
        if it == opts.max_iter:
            state.verdict = STALLED
            break
        accepted = False
        while step >= opts.min_step:
            trial = _step(loop, tan, step)
            if trial is not None:
                S_new = discrete_action(L, trial.nodes, trial.T, k)[0]
                # the strict test stops steps whose decrease is below rounding
                if np.isfinite(S_new) and S_new <= S - opts.armijo * step * g2 and S_new < S:
                    accepted = True
                    break
            step *= opts.shrink
        if not accepted:
            state.verdict = STALLED
            break
        state.steps.append(step)
        t_flow += step
        loop, S = trial, S_new
        state.step = step
        step = min(step * opts.grow, opts.step_max)
    _GUARD_COUNTS["descents"] += 1
    _GUARD_COUNTS["collapses"] += state.verdict == T_COLLAPSE
    if state.verdict == T_COLLAPSE and band_excludes_zero(state.action_history, opts.band_tol):
        _GUARD_VIOLATIONS.append((k, state.action_history[0], state.action_history[-1]))
    return state


# ---------------------------------------------------------------- Newton


@dataclass
class Residuals:
    el_residual: float
    energy_error: float
    pointwise_energy: float
    iterations: int


def residuals(L, loop: FreeTimeLoop, k: float, iterations=0) -> Residuals:
    S, grad, dT, E, _ = discrete_action(L, loop.nodes, loop.T, k)
    r = el_residual(L, loop, k)
    return Residuals(float(np.max(np.abs(r))), abs(dT), float(np.max(np.abs(E - k))), iterations)


def _coloring(loop):
    """Column groups whose nodes are >= 3 apart (cyclically for closed loops)."""
    sl = _free_slice(loop)
    idx = np.arange(loop.N + 1)[sl]
    n = idx.size
    groups = []
    if loop.mode == CLOSED:
        full = n - n % 3
        for c in range(3):
            groups.append(list(range(c, full, 3)))
        groups.extend([j] for j in range(full, n))
    else:
        for c in range(3):
            groups.append(list(range(c, n, 3)))
    return [g for g in groups if g]


def residual_jacobian(L, loop: FreeTimeLoop, k: float, h=1e-6):
    """Jacobian of the packed gradient w.r.t. the packed coordinates.

    Central differences with column compression: the node gradient only
    couples nearest neighbours, so three node colours per coordinate suffice.
    """
    z0 = pack(loop)
    d = loop.dim
    n = z0.size
    nfree = (n - 1) // d
    J = np.zeros((n, n))
    for group in _coloring(loop):
        for c in range(d):
            e = np.zeros(n)
            cols = [j * d + c for j in group]
            e[cols] = h
            gp = packed_gradient(L, unpack(loop, z0 + e), k)
            gm = packed_gradient(L, unpack(loop, z0 - e), k)
            diff = (gp - gm) / (2 * h)
            rows_node = diff[:-1].reshape(nfree, d)
            for j in group:
                # rows touched by column j: its own node and the two neighbours
                for r in (j - 1, j, j + 1):
                    rr = r % nfree if loop.mode == CLOSED else r
                    if 0 <= rr < nfree:
                        J[rr * d : rr * d + d, j * d + c] = rows_node[rr]
                J[-1, j * d + c] = 0.0
            # the T row couples to every node: difference it separately below
    hT = h * max(1.0, abs(loop.T))
    e = np.zeros(n)
    e[-1] = hT
    J[:, -1] = (packed_gradient(L, unpack(loop, z0 + e), k) - packed_gradient(L, unpack(loop, z0 - e), k)) / (2 * hT)
    # dS/dT is symmetric partner of the T column
    J[-1, :-1] = J[:-1, -1]
    return J


def refine_critical(L, k, loop: FreeTimeLoop, tol=1e-9, max_iter=40):
    """Newton iteration on (discrete EL residual, mean energy - k) = 0.

    Unknowns are the free nodes and T.  Steps come from a least-squares solve
    so that exact symmetry directions (translations, time shift) do not
    break the iteration.  Raises :class:`RefineFailed` when the residual
    stops decreasing.
    """
    cur = loop
    F = packed_gradient(L, cur, k)
    res = float(np.max(np.abs(F)))
    for it in range(max_iter):
        if res <= tol:
            return cur, residuals(L, cur, k, it)
        J = residual_jacobian(L, cur, k)
        dz = np.linalg.lstsq(J, -F, rcond=1e-12)[0]
        lam = 1.0
        z0 = pack(cur)
        while lam > 1e-4:
            z = z0 + lam * dz
            if z[-1] > 0:
                trial = unpack(cur, z)
                Ft = packed_gradient(L, trial, k)
                rt = float(np.max(np.abs(Ft)))
                if np.isfinite(rt) and rt < res:
                    break
            lam *= 0.5
        else:
            raise RefineFailed(f"Newton stalled at residual {res:.3e}", cur, residuals(L, cur, k, it))
        cur, F, res = trial, Ft, rt
    if res <= tol:
        return cur, residuals(L, cur, k, max_iter)
    raise RefineFailed(f"Newton did not reach {tol:g} (residual {res:.3e})", cur, residuals(L, cur, k, max_iter))


# ---------------------------------------------------------------- EL orbits


@dataclass
class OrbitSample:
    """Trajectory samples of the Euler-Lagrange flow."""

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    E: np.ndarray
    dt: float
    phis: np.ndarray | None = None

    @property
    def energy_drift(self) -> float:
        return float(np.max(np.abs(self.E - self.E[0])))

    def write_csv(self, path):
        d = self.x.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{i + 1}" for i in range(d)] + [f"v{i + 1}" for i in range(d)] + ["E"])
            for t, x, v, e in zip(self.t, self.x, self.v, self.E):
                w.writerow([f"{t:.17g}"] + [f"{a:.17g}" for a in x] + [f"{a:.17g}" for a in v] + [f"{e:.17g}"])


def _generic_rhs(L, x, v):
    return v, L.acceleration(x, v)


def _generic_rk4(L, x, v, dt, nsteps, variational):
    d = x.size
    xs = np.empty((nsteps + 1, d))
    vs = np.empty((nsteps + 1, d))
    xs[0], vs[0] = x, v
    phis = np.empty((nsteps + 1, 2 * d, 2 * d)) if variational else None
    phi = np.eye(2 * d)
    if variational:
        phis[0] = phi

    def f(y):
        a = L.acceleration(y[:d], y[d:])
        return np.concatenate([y[d:], a])

    def jac(y, eps=1e-6):
        J = np.empty((2 * d, 2 * d))
        for j in range(2 * d):
            e = np.zeros(2 * d)
            e[j] = eps
            J[:, j] = (f(y + e) - f(y - e)) / (2 * eps)
        return J

    y = np.concatenate([x, v])
    for i in range(nsteps):
        k1 = f(y)
        k2 = f(y + 0.5 * dt * k1)
        k3 = f(y + 0.5 * dt * k2)
        k4 = f(y + dt * k3)
        if variational:
            p1 = jac(y) @ phi
            p2 = jac(y + 0.5 * dt * k1) @ (phi + 0.5 * dt * p1)
            p3 = jac(y + 0.5 * dt * k2) @ (phi + 0.5 * dt * p2)
            p4 = jac(y + dt * k3) @ (phi + dt * p3)
            phi = phi + dt / 6 * (p1 + 2 * p2 + 2 * p3 + p4)
            phis[i + 1] = phi
        y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise NumericError(f"non-finite EL state at step {i + 1}")
        xs[i + 1], vs[i + 1] = y[:d], y[d:]
    return xs, vs, phis


def _rk4_steps(L, x0, v0, dt, nsteps, variational):
    tab = _tables(L)
    if tab is None:
        return _generic_rk4(L, x0, v0, dt, nsteps, variational)
    xs, vs, phis, count = kernels.el_rk4(tab, x0, v0, dt, nsteps, variational)
    if count == nsteps + 1:
        return xs, vs, phis
    # left the closed-form region: finish the remaining steps generically
    i = count - 1
    if not (np.all(np.isfinite(xs[i])) and np.all(np.isfinite(vs[i]))):
        raise NumericError("non-finite EL state")
    xr, vr, pr = _generic_rk4(L, xs[i], vs[i], dt, nsteps - i, variational)
    xs[i:], vs[i:] = xr, vr
    if variational:
        phis[i:] = pr @ phis[i]
    return xs, vs, phis


def integrate_el(L, x0, v0, t_span, dt, variational=False) -> OrbitSample:
    """Classical RK4 on the Euler-Lagrange system.

    Parameters
    ----------
    t_span : float or (t0, t1)
        Duration, or an interval whose length is used.  ``dt`` is shrunk so
        that an integer number of steps lands exactly on the end time.
    variational : bool
        Also propagate the 2d x 2d linearised flow.
    """
    if not dt > 0:
        raise InvalidInputError("dt must be positive")
    t0, t1 = (0.0, float(t_span)) if np.isscalar(t_span) else map(float, t_span)
    span = t1 - t0
    if span < 0:
        raise InvalidInputError("t_span must be non-negative")
    nsteps = int(math.ceil(span / dt - 1e-9)) if span > 0 else 0
    h = span / nsteps if nsteps else dt
    x0 = np.asarray(x0, float)
    v0 = np.asarray(v0, float)
    if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(v0))):
        raise InvalidInputError("non-finite initial state")
    xs, vs, phis = _rk4_steps(L, x0, v0, h, nsteps, variational)
    t = t0 + h * np.arange(nsteps + 1)
    E = L.energy(xs, vs)
    return OrbitSample(t, xs, vs, np.atleast_1d(E), h, phis)


def initial_velocity(L, loop: FreeTimeLoop):
    """Velocity at node 0 from the discrete Legendre transform of the loop."""
    _, Lx, Lv, _ = _segment_derivs(L, loop)
    h = loop.T / loop.N
    p = Lv[-1] + 0.5 * h * Lx[-1] if loop.mode == CLOSED else Lv[0] - 0.5 * h * Lx[0]
    return L.legendre_inverse(loop.nodes[0], p)


def _segment_derivs(L, loop):
    v = np.diff(loop.nodes, axis=0) * (loop.N / loop.T)
    m = 0.5 * (loop.nodes[:-1] + loop.nodes[1:])
    return L.evaluate(m, v)


def closure_error(L, loop: FreeTimeLoop, x0=None, v0=None, dt=1e-3):
    """Distance between the EL flow after one period and the lifted start."""
    x0 = loop.nodes[0] if x0 is None else x0
    v0 = initial_velocity(L, loop) if v0 is None else v0
    orb = integrate_el(L, x0, v0, loop.T, dt)
    shift = loop.nodes[-1] - loop.nodes[0]
    return float(np.linalg.norm(orb.x[-1] - (x0 + shift)) + np.linalg.norm(orb.v[-1] - v0)), orb


def shoot_closed_orbit(L, k, x0, v0, T, winding, dt=1e-3, tol=1e-11, max_iter=30):
    """Newton shooting for an exact periodic EL orbit at energy k.

    Unknowns are (x0, v0, T); equations are closure of position and velocity
    plus E(x0, v0) = k.  The position along the orbit is free, so the
    least-squares step removes that null direction.
    """
    x0, v0 = np.asarray(x0, float), np.asarray(v0, float)
    w = np.asarray(winding, float)
    d = x0.size
    for it in range(max_iter):
        orb = integrate_el(L, x0, v0, T, dt, variational=True)
        xe, ve, M = orb.x[-1], orb.v[-1], orb.phis[-1]
        F = np.concatenate([xe - x0 - w, ve - v0, [L.energy(x0, v0) - k]])
        if np.max(np.abs(F)) <= tol:
            return x0, v0, T, orb
        ae = L.acceleration(xe, ve)
        J = np.zeros((2 * d + 1, 2 * d + 1))
        J[: 2 * d, : 2 * d] = M - np.eye(2 * d)
        J[: 2 * d, -1] = np.concatenate([ve, ae])
        _, Lx, Lv, _ = L.evaluate(x0, v0)
        Ex = v0 @ L.mixed(x0, v0) - Lx
        Ev = L.evaluate(x0, v0)[3] @ v0
        J[-1, :d] = Ex
        J[-1, d : 2 * d] = Ev
        dz = np.linalg.lstsq(J, -F, rcond=1e-12)[0]
        x0, v0, T = x0 + dz[:d], v0 + dz[d : 2 * d], T + dz[-1]
        if not T > 0:
            raise NumericError("shooting drove the period negative")
    raise NumericError("shooting did not converge")


# ---------------------------------------------------------------- measures


@dataclass
class EmpiricalMeasure:
    """Time-weighted distribution of (x mod 1, velocity) along a loop."""

    hist: np.ndarray
    edges: list
    mean_energy: float
    action_per_time: float
    mean_velocity: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    weights: np.ndarray

    @property
    def total_mass(self) -> float:
        return float(self.hist.sum())

    def tube_mass(self, coord: int, level: float, radius: float) -> float:
        """Mass within ``radius`` of the hyperplane x[coord] = level (mod 1)."""
        dist = np.abs((self.positions[:, coord] - level + 0.5) % 1.0 - 0.5)
        return float(self.weights[dist <= radius].sum())


def empirical_measure(loop: FreeTimeLoop, L, bins=8, k=0.0) -> EmpiricalMeasure:
    """Histogram of (x(s), x'(s)/T) sampled at segment midpoints.

    Parameters
    ----------
    bins : int
        Bins per coordinate; positions span the unit cell, velocities span
        their sampled range.
    k : float
        Energy shift used for the action-per-time summary.
    """
    S, _, _, E, _ = discrete_action(L, loop.nodes, loop.T, k)
    v = np.diff(loop.nodes, axis=0) * (loop.N / loop.T)
    x = (0.5 * (loop.nodes[:-1] + loop.nodes[1:])) % 1.0
    w = np.full(loop.N, 1.0 / loop.N)
    d = loop.dim
    ranges = [(0.0, 1.0)] * d
    for j in range(d):
        lo, hi = float(v[:, j].min()), float(v[:, j].max())
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
        ranges.append((lo, hi))
    hist, edges = np.histogramdd(np.hstack([x, v]), bins=bins, range=ranges, weights=w)
    hist /= hist.sum()
    mean_vel = (loop.nodes[-1] - loop.nodes[0]) / loop.T
    return EmpiricalMeasure(hist, edges, float(np.mean(E)), S / loop.T, mean_vel, x, v, w)


# ---------------------------------------------------------------- diagnosis


@dataclass
class PSDiagnosis:
    verdict: str
    q0: np.ndarray | None = None
    dpsi_norm: float | None = None
    energy_gap: float | None = None
    measure: EmpiricalMeasure | None = None
    checks: dict = field(default_factory=dict)


def _grad_psi(L, q):
    h = 1e-6
    g = np.empty(q.size)
    for j in range(q.size):
        e = np.zeros(q.size)
        e[j] = h
        g[j] = (L.psi(q + e) - L.psi(q - e)) / (2 * h)
    return g


def diagnose_ps(state: DescentState, L, k, bins=8, tol=1e-2) -> PSDiagnosis:
    """Classify a finished descent run.

    A collapse reports the limit point q0 (action-weighted node mean), the
    size of d psi there and |E(q0, 0) - k|.  A blow-up reports the empirical
    measure and checks that mean energy is near k while action per unit
    time and mean velocity are near zero.
    """
    if state.verdict is None:
        raise InvalidInputError("descent state has not terminated")
    loop = state.loop
    if state.verdict == T_COLLAPSE:
        _, _, _, _, Lseg = discrete_action(L, loop.nodes, loop.T, k)
        w = np.abs(Lseg + k)
        mid = 0.5 * (loop.nodes[:-1] + loop.nodes[1:])
        q0 = (w @ mid / w.sum()) if w.sum() > 0 else mid.mean(axis=0)
        q0 = q0 % 1.0
        dpsi = float(np.linalg.norm(_grad_psi(L, q0)))
        gap = float(abs(-L.psi(q0) - k))
        return PSDiagnosis(T_COLLAPSE, q0, dpsi, gap, checks={"energy_gap": gap <= tol, "dpsi": dpsi <= tol})
    if state.verdict == T_BLOWUP:
        mu = empirical_measure(loop, L, bins, k)
        checks = {
            "mean_energy": abs(mu.mean_energy - k) <= tol,
            "action_per_time": abs(mu.action_per_time) <= tol,
            "mean_velocity": float(np.linalg.norm(mu.mean_velocity)) <= 5 * tol,
        }
        return PSDiagnosis(T_BLOWUP, measure=mu, checks=checks)
    return PSDiagnosis(state.verdict)


def write_descent_log(path, state: DescentState):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "action", "gradnorm", "T"])
        for i, a, g, T in state.log_rows():
            w.writerow([i, f"{a:.17g}", f"{g:.17g}", f"{T:.17g}"])
