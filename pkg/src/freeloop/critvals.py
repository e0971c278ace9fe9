"""Critical energy values and the Peierls barrier as loop optimisation problems.

Lower bounds for c and c_u come from maximising ``-A_L(loop) / T`` over
closed loops, which is the same as asking for the smallest k making every
(L + k)-action nonnegative.  Each bound carries the loop that attains it.
"""

from __future__ import annotations

import csv
import itertools
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .loops import CLOSED, FIXED, FreeTimeLoop, discrete_action, pack, unpack, write_loop, _free_slice
from .minimax import _circle_nodes, _uniform_speed
from .systems import InvalidInputError


# ---------------------------------------------------------------- e0


def _psi_derivs(L, x):
    field_ = getattr(L, "psi_field", None)
    if field_ is not None:
        return field_.grad(x[None])[0], field_.hess(x[None])[0]
    h = 1e-5
    d = x.size
    g = np.zeros(d)
    H = np.zeros((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        g[i] = (L.psi(x + e) - L.psi(x - e)) / (2 * h)
        for j in range(d):
            f = np.zeros(d)
            f[j] = h
            H[i, j] = (L.psi(x + e + f) - L.psi(x + e - f) - L.psi(x - e + f) + L.psi(x - e - f)) / (4 * h * h)
    return g, H


def e0_argmax(L, grid=64):
    """Maximiser of E(x, 0) = -L(x, 0): grid scan plus one Newton polish."""
    if grid < 64:
        raise InvalidInputError("e0 grid needs at least 64 points per dimension")
    d = L.dim
    axes = [np.arange(grid) / grid] * d
    x = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
    vals = -np.asarray(L.psi(x))
    q = x[int(np.argmax(vals))]
    best = float(vals.max())
    g, H = _psi_derivs(L, q)
    # E(x, 0) = -psi; Newton on grad psi = 0, kept only if it improves
    try:
        step = np.linalg.solve(H, -g)
    except np.linalg.LinAlgError:
        return q, best
    if np.linalg.norm(step) < 1.0 / grid:
        cand = q + step
        val = -float(L.psi(cand))
        if val > best:
            return cand, val
    return q, best


def e0_exact(L, grid=64) -> float:
    """max_x E(x, 0), the smallest energy whose level projects onto the torus."""
    return e0_argmax(L, grid)[1] + 0.0


# ---------------------------------------------------------------- c and c_u


def ratio(L, loop: FreeTimeLoop) -> float:
    """-A_L(loop) / T, the energy below which this loop has negative action."""
    return -discrete_action(L, loop.nodes, loop.T, 0.0)[0] / loop.T + 0.0  # no negative zero


def _ascend(L, loop: FreeTimeLoop, maxiter=200) -> FreeTimeLoop:
    """Maximise -A_L / T over free nodes and log T with L-BFGS."""
    sl = _free_slice(loop)

    def f(z):
        lp = unpack(loop, z, log_T=True)
        S, grad, dT, _, _ = discrete_action(L, lp.nodes, lp.T, 0.0)
        T = lp.T
        g = grad.copy()
        if loop.mode == CLOSED:
            g[0] += g[-1]
        gz = np.concatenate([g[sl].ravel() / T, [dT - S / T]])
        return S / T, gz

    z0 = pack(loop, log_T=True)
    with np.errstate(all="ignore"):
        res = minimize(f, z0, jac=True, method="L-BFGS-B", options={"maxiter": maxiter})
    z = res.x if np.all(np.isfinite(res.x)) else z0
    z[-1] = np.clip(z[-1], math.log(1e-3), math.log(1e4))
    cand = unpack(loop, z, log_T=True)
    return cand if ratio(L, cand) >= ratio(L, loop) else loop


def _best_period(L, nodes):
    """T maximising -A_L / T for fixed nodes (A_L = a / T + b + c T in the core)."""
    probes = np.array([0.5, 1.0, 2.0]) * max(1.0, 0.04 * np.sum(np.linalg.norm(np.diff(nodes, axis=0), axis=1)))
    S = np.array([discrete_action(L, nodes, T, 0.0)[0] for T in probes])
    a, b, _ = np.linalg.solve(np.array([[1 / T, 1.0, T] for T in probes]), S)
    # -A/T = -a/T^2 - b/T - c, stationary at T = -2a/b
    if a > 0 and b < 0:
        return float(-2 * a / b)
    return float(probes[1])


def _straight_starts(L, N):
    d = L.dim
    for w in itertools.product((-1, 0, 1), repeat=d):
        if not any(w):
            continue
        for off in np.arange(8) / 8:
            q0 = np.zeros(d)
            q0[int(np.argmin(np.abs(w)))] = off
            lp = FreeTimeLoop.straight(q0, w, 1.0, N)
            yield lp.with_T(_best_period(L, lp.nodes))


def _contractible_starts(L, N, rect_heights=(1.0, 4.0, 16.0, 64.0)):
    d = L.dim
    x = np.stack(np.meshgrid(*[np.arange(16) / 16] * d, indexing="ij"), -1).reshape(-1, d)
    q = x[int(np.argmin(L.psi(x)))]
    yield FreeTimeLoop.constant(q, 1.0, N)
    if d != 2:
        return
    for cx, cy in itertools.product(np.arange(4) / 4, repeat=2):
        for r in (0.05, 0.15):
            for o in (1, -1):
                nodes = _circle_nodes((cx, cy), r, N, o)
                yield FreeTimeLoop(nodes, _best_period(L, nodes))
    for a in np.arange(4) / 4:
        for D in rect_heights:
            for o in (1, -1):
                vert = [[a, 0], [a, D], [a + 0.5, D], [a + 0.5, 0], [a, 0]]
                if o < 0:
                    vert = vert[::-1]
                n = int(max(N, 4 * (2 * D + 1)))
                nodes = _uniform_speed(FreeTimeLoop.polygon(vert, 1.0, n).nodes)
                yield FreeTimeLoop(nodes, _best_period(L, nodes))


def _maximise(L, starts, budget, keep=4):
    """Score every start, ascend the best ``keep``; ties broken lexicographically."""
    scored = sorted(((ratio(L, s), i, s) for i, s in enumerate(starts)), key=lambda t: (-t[0], t[1]))
    best_val, best = -math.inf, None
    for val, _, s in scored[:keep]:
        cand = _ascend(L, s, budget)
        v = ratio(L, cand)
        if v > best_val:
            best_val, best = v, cand
    return best_val, best


def cu_lower(L, budget=200, N=64, extra_starts=()):
    """Raw lower bound for c_u from contractible loops, with its witness."""
    if budget < 1:
        raise InvalidInputError("budget must be >= 1")
    starts = list(_contractible_starts(L, N)) + list(extra_starts)
    return _maximise(L, starts, budget)


def mane_c_lower(L, budget=200, N=64, extra_starts=()):
    """Raw lower bound for c over all winding classes, with its witness."""
    if budget < 1:
        raise InvalidInputError("budget must be >= 1")
    starts = list(_straight_starts(L, N)) + list(_contractible_starts(L, N)) + list(extra_starts)
    return _maximise(L, starts, budget)


def c0_estimate(L, form_grid=None, budget=100, N=64, seeds=(), polish=True):
    """min over constant 1-forms of the c lower bound of L - omega.

    ``seeds`` are loops added to every inner search; passing the contractible
    witness keeps the estimate above the c_u bound, since exact forms do not
    change the action of contractible loops.  Returns
    ``(value, lambda, witness)``.
    """
    d = L.dim
    if form_grid is None:
        form_grid = [np.array(p) for p in itertools.product((-1.0, 0.0, 1.0), repeat=d)]
    cache = {}

    def value(lam):
        key = tuple(np.round(lam, 12))
        if key not in cache:
            cache[key] = mane_c_lower(L.with_closed_form(lam), budget, N, seeds)
        return cache[key]

    def key(lam):
        # ties (to 1e-9) go to the smallest form, then lexicographically
        return (round(value(lam)[0], 9), float(np.abs(lam).sum()), tuple(lam))

    lam_best = min((np.asarray(lam, float) for lam in form_grid), key=key)
    if polish:
        step = 0.5
        while step >= 1.0 / 64:
            moved = False
            for i in range(d):
                for sgn in (1, -1):
                    trial = lam_best.copy()
                    trial[i] += sgn * step
                    if value(trial)[0] < value(lam_best)[0] - 1e-9:
                        lam_best, moved = trial, True
            if not moved:
                step *= 0.5
    v, w = value(lam_best)
    return v, lam_best, w


# ---------------------------------------------------------------- Peierls barrier


def peierls_phi(L, c, q0, q1, T, N=None, starts=(), maxiter=500):
    """Minimal (L + c)-action over paths from q0 to the lift q1 in time T.

    Multistart L-BFGS over interior nodes at frozen T.  ``starts`` are
    extra initial node arrays; the straight path is always tried.  Returns
    ``(value, best path)``; ``value`` is NaN when every start fails.
    """
    if not T > 0:
        raise InvalidInputError("T must be positive")
    q0, q1 = np.asarray(q0, float), np.asarray(q1, float)
    N = N or max(64, int(4 * T))
    base = FreeTimeLoop.path(q0, q1, T, N)
    cands = [base]
    for nodes in starts:
        nodes = np.array(nodes, float)
        if nodes.shape[0] != N + 1:
            s_old = np.linspace(0, 1, nodes.shape[0])
            s_new = np.linspace(0, 1, N + 1)
            nodes = np.column_stack([np.interp(s_new, s_old, nodes[:, j]) for j in range(nodes.shape[1])])
        nodes[0], nodes[-1] = q0, q1
        cands.append(FreeTimeLoop(nodes, T, FIXED))
    best_val, best = math.nan, None
    for lp in cands:

        def f(z, lp=lp):
            nodes = np.array(lp.nodes)
            nodes[1:-1] = z.reshape(-1, lp.dim)
            S, grad, _, _, _ = discrete_action(L, nodes, T, c)
            return S, grad[1:-1].ravel()

        with np.errstate(all="ignore"):
            res = minimize(f, lp.nodes[1:-1].ravel(), jac=True, method="L-BFGS-B", options={"maxiter": maxiter})
        if not np.isfinite(res.fun):
            continue
        nodes = np.array(lp.nodes)
        nodes[1:-1] = res.x.reshape(-1, lp.dim)
        out = FreeTimeLoop(nodes, T, FIXED)
        val = discrete_action(L, out.nodes, T, c)[0]
        if not best_val <= val:
            best_val, best = val, out
    return best_val, best


def excursion_guess(q0, T, height=None, width=0.5, axis=1):
    """Closed excursion from q0: out along one axis, across, back, and home.

    A cheap start for barrier computations on systems whose minimisers ride
    two oppositely oriented closed orbits.
    """
    q0 = np.asarray(q0, float)
    d = q0.size
    other = (axis + 1) % d
    D = 0.5 * T - width if height is None else height
    D = max(D, 0.0)
    e_a = np.eye(d)[axis]
    e_o = np.eye(d)[other]
    verts = [q0, q0 + D * e_a, q0 + D * e_a + width * e_o, q0 + width * e_o, q0]
    n = max(64, int(4 * T))
    return _uniform_speed(FreeTimeLoop.polygon(np.array(verts), 1.0, n).nodes)


def peierls_scan(L, c, q0, q1, T_grid, starts_fn=None):
    """Phi over a grid of periods; failed points are NaN.

    ``starts_fn(T)`` may supply extra start paths for each period.
    """
    out = []
    for T in T_grid:
        starts = starts_fn(T) if starts_fn is not None else ()
        try:
            val, _ = peierls_phi(L, c, q0, q1, T, starts=starts)
        except (InvalidInputError, np.linalg.LinAlgError, FloatingPointError):
            val = math.nan
        out.append(val)
    return np.array(out, float)


# ---------------------------------------------------------------- report


@dataclass
class CriticalValues:
    e0: float
    c_lower: float
    cu_lower: float
    c0_estimate: float
    witnesses: dict = field(default_factory=dict)
    c0_form: np.ndarray | None = None

    @property
    def clamped(self) -> dict:
        """Reported values: raw bounds raised to respect e0 <= c_u <= c0 <= c."""
        cu = max(self.e0, self.cu_lower)
        c = max(cu, self.c_lower)
        c0 = min(max(cu, self.c0_estimate), c)
        return {"e0": self.e0, "cu": cu, "c0": c0, "c": c}

    @property
    def raw(self) -> dict:
        return {"e0": self.e0, "cu": self.cu_lower, "c0": self.c0_estimate, "c": self.c_lower}


def critical_values(L, budget=200, N=64, forms=None, c0_budget=60) -> CriticalValues:
    """All four values with witnesses.

    The contractible witness seeds the c and c0 searches, so the raw values
    already satisfy c_u <= c0 and c_u <= c.
    """
    q, e0 = e0_argmax(L)
    e0 += 0.0
    cu, w_cu = cu_lower(L, budget, N)
    c, w_c = mane_c_lower(L, budget, N, extra_starts=[w_cu])
    if forms is None and L.dim == 2:
        forms = [np.array(p) for p in itertools.product((-1.0, -0.5, 0.0, 0.5, 1.0), repeat=2)]
    c0, lam, w_c0 = c0_estimate(L, forms, c0_budget, N, seeds=[w_cu, w_c])
    # the omega = 0 member of the form set is L itself
    c0 = min(c0, c)
    wit = {"e0": FreeTimeLoop.constant(q, 1.0, N), "cu": w_cu, "c": w_c, "c0": w_c0}
    return CriticalValues(e0, c, cu, c0, wit, lam)


def write_report(path, cv: CriticalValues, witness_dir=None, seed=None):
    """CSV rows: quantity, raw, clamped, witness file."""
    witness_dir = witness_dir or os.path.dirname(os.path.abspath(path))
    raw, clamped = cv.raw, cv.clamped
    with open(path, "w", newline="") as fh:
        if seed is not None:
            fh.write(f"# seed={seed}\n")
        w = csv.writer(fh)
        w.writerow(["quantity", "raw", "clamped", "witness"])
        for q in ("e0", "cu", "c0", "c"):
            wpath = ""
            loop = cv.witnesses.get(q)
            if loop is not None:
                wpath = os.path.join(witness_dir, f"witness_{q}.loop")
                write_loop(wpath, loop, {"quantity": q, "ratio": f"{ratio_for(q, cv):.17g}"})
                wpath = os.path.basename(wpath)
            w.writerow([q, f"{raw[q]:.17g}", f"{clamped[q]:.17g}", wpath])


def ratio_for(q, cv: CriticalValues) -> float:
    return cv.raw[q]
