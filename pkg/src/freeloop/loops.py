"""Discrete free-period loops, the action functional and its H1 gradient.

A loop is stored as N+1 lifted nodes on the uniform grid s_i = i/N plus a
period T.  Node arithmetic stays in the universal cover; fields are
periodic, so wrapping happens implicitly when the Lagrangian is evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .systems import InvalidInputError, NumericError

CLOSED = "closed"
FIXED = "fixed"


@dataclass(frozen=True, eq=False)
class FreeTimeLoop:
    """A point of (loop space) x (0, inf).

    Parameters
    ----------
    nodes : (N+1, d) array
        Lifted nodes; in closed mode the last one equals the first plus the
        winding vector.
    T : float
        Period, strictly positive.
    mode : {"closed", "fixed"}
    """

    nodes: np.ndarray
    T: float
    mode: str = CLOSED

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        if nodes.ndim != 2 or nodes.shape[0] < 3:
            raise InvalidInputError("nodes must be an (N+1, d) array with N >= 2")
        if not np.all(np.isfinite(nodes)):
            raise InvalidInputError("non-finite node coordinates")
        if not (np.isfinite(self.T) and self.T > 0):
            raise InvalidInputError(f"period must be positive, got T={self.T}")
        if self.mode not in (CLOSED, FIXED):
            raise InvalidInputError(f"unknown endpoint mode {self.mode!r}")
        if self.mode == CLOSED:
            gap = nodes[-1] - nodes[0]
            w = np.round(gap)
            if np.max(np.abs(gap - w)) > 1e-9:
                raise InvalidInputError("closed loop must end at a lift of its start")
            nodes[-1] = nodes[0] + w
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "T", float(self.T))

    @property
    def N(self) -> int:
        return self.nodes.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def winding(self) -> tuple:
        return winding_class(self)

    def with_nodes(self, nodes, T=None):
        """Copy with new nodes (closure re-imposed in closed mode)."""
        nodes = np.array(nodes, dtype=float)
        if self.mode == CLOSED:
            nodes[-1] = nodes[0] + (self.nodes[-1] - self.nodes[0])
        return FreeTimeLoop(nodes, self.T if T is None else T, self.mode)

    def with_T(self, T):
        return FreeTimeLoop(self.nodes, T, self.mode)

    # -- constructors
    @classmethod
    def constant(cls, q0, T, N=64):
        q0 = np.asarray(q0, float)
        return cls(np.tile(q0, (N + 1, 1)), T, CLOSED)

    @classmethod
    def straight(cls, q0, winding, T, N=64):
        q0 = np.asarray(q0, float)
        s = np.arange(N + 1)[:, None] / N
        return cls(q0 + s * np.asarray(winding, float), T, CLOSED)

    @classmethod
    def circle(cls, center, radius, T, N=64, plane=(0, 1), orientation=1):
        center = np.asarray(center, float)
        s = 2 * np.pi * orientation * np.arange(N + 1) / N
        nodes = np.tile(center, (N + 1, 1))
        nodes[:, plane[0]] += radius * np.cos(s)
        nodes[:, plane[1]] += radius * np.sin(s)
        nodes[-1] = nodes[0]
        return cls(nodes, T, CLOSED)

    @classmethod
    def polygon(cls, vertices, T, N=64):
        """Closed polygon through lifted vertices, corners kept as nodes.

        Each edge gets a number of segments proportional to its length (at
        least one); the last vertex must be a lift of the first.
        """
        vert = np.asarray(vertices, float)
        seg = np.linalg.norm(np.diff(vert, axis=0), axis=1)
        if N < seg.size:
            raise InvalidInputError("polygon needs at least one segment per edge")
        counts = np.maximum(1, np.round(N * seg / seg.sum()).astype(int))
        counts[np.argmax(counts)] += N - counts.sum()
        pieces = []
        for p, q, n in zip(vert[:-1], vert[1:], counts):
            s = np.arange(n)[:, None] / n
            pieces.append(p + s * (q - p))
        pieces.append(vert[-1:])
        return cls(np.vstack(pieces), T, CLOSED)

    @classmethod
    def path(cls, q0, q1, T, N=64):
        """Straight fixed-endpoint curve from the lift q0 to the lift q1."""
        q0, q1 = np.asarray(q0, float), np.asarray(q1, float)
        s = np.arange(N + 1)[:, None] / N
        return cls(q0 + s * (q1 - q0), T, FIXED)


@dataclass
class LoopTangent:
    """Node vectors ``xi`` (N+1, d) and the period component ``alpha``."""

    xi: np.ndarray
    alpha: float


@dataclass
class LoopCotangent:
    """Pairing coefficients: ``c(xi, alpha) = sum_i dx[i] . xi[i] + dT * alpha``."""

    dx: np.ndarray
    dT: float

    def pair(self, tangent: LoopTangent) -> float:
        return float(np.sum(self.dx * tangent.xi) + self.dT * tangent.alpha)


def admissible(loop: FreeTimeLoop, xi):
    """Project node vectors onto the tangent space of the loop's mode."""
    xi = np.array(xi, dtype=float)
    if loop.mode == CLOSED:
        xi[-1] = xi[0]
    else:
        xi[0] = 0.0
        xi[-1] = 0.0
    return xi


# ---------------------------------------------------------------- weights


def _hermite(t, p0, m0, p1, m1, h):
    t2, t3 = t * t, t * t * t
    return (2 * t3 - 3 * t2 + 1) * p0 + (t3 - 2 * t2 + t) * h * m0 + (-2 * t3 + 3 * t2) * p1 + (t3 - t2) * h * m1


_LOG_G10 = -400.0 - np.log(10.0)


def weights(T):
    """Base-point weight f(T) and derivative weight g(T) of the loop metric.

    Both equal T**2 for T <= 1.  For T >= 10, f = 1 and g = exp(-4 T**2) / T.
    In between, f = 1 + 2 y exp(-y) q(y) with y = T - 1 and q a smoothstep
    falling from 1 to 0, and log g is the cubic Hermite interpolant of the
    boundary values and slopes; both blends are C1 and stay below 2.
    """
    T = float(T)
    if not T > 0:
        raise InvalidInputError("T must be positive")
    if T <= 1.0:
        return T * T, T * T
    if T >= 10.0:
        return 1.0, float(np.exp(-4.0 * T * T) / T)
    y = T - 1.0
    r = y / 9.0
    q = 1.0 - 3.0 * r * r + 2.0 * r**3
    f = 1.0 + 2.0 * y * np.exp(-y) * q
    logg = _hermite(y / 9.0, 0.0, 2.0, _LOG_G10, -80.0 - 0.1, 9.0)
    return float(f), float(np.exp(logg))


def capped_weights(T):
    """min(T**2, 1) for both weights; a well-conditioned descent metric."""
    w = min(float(T) ** 2, 1.0)
    return w, w


def _weighted_coeffs(T):
    f, g = weights(T)
    return 1.0, f, g, 0.0


def _capped_coeffs(T):
    f, g = capped_weights(T)
    return 1.0, f, g, 0.0


def _natural_coeffs(T):
    # physical-time H1: (1/T) int |xi'|^2 ds + T int |xi|^2 ds, period scaled by 1/T
    return 1.0 / T, 0.0, 1.0 / T, T


# each entry maps T to (period weight, base-point weight f, derivative weight g, mass weight)
METRICS = {
    "weighted": _weighted_coeffs,
    "capped": _capped_coeffs,
    "unit": lambda T: (1.0, 1.0, 1.0, 0.0),
    "natural": _natural_coeffs,
}


def _coeffs(metric, T):
    if callable(metric):
        return metric(T)
    try:
        return METRICS[metric](float(T))
    except KeyError:
        raise InvalidInputError(f"unknown metric {metric!r}") from None


# ---------------------------------------------------------------- action


def _tables(L):
    tab = getattr(L, "_kernel_cache", None)
    if tab is None and hasattr(L, "kernel_tables"):
        tab = L.kernel_tables()
        L._kernel_cache = tab
    return tab


def _generic_action(L, nodes, T, k):
    N = nodes.shape[0] - 1
    v = np.diff(nodes, axis=0) * (N / T)
    m = 0.5 * (nodes[:-1] + nodes[1:])
    Ls, Lx, Lv, _ = L.evaluate(m, v)
    E = np.einsum("ni,ni->n", v, Lv) - Ls
    h = T / N
    grad = np.zeros_like(nodes)
    half = 0.5 * h * Lx
    grad[:-1] += half - Lv
    grad[1:] += half + Lv
    return h * float(np.sum(Ls + k)), grad, float(np.mean(k - E)), E, Ls


def discrete_action(L, nodes, T, k):
    """Raw kernel call: ``(S, dS/dnodes, dS/dT, E_seg, L_seg)`` for lifted nodes."""
    tab = _tables(L)
    if tab is not None:
        return kernels.loop_action(tab, nodes, T, k)
    return _generic_action(L, np.asarray(nodes, float), T, k)


def action(L, loop: FreeTimeLoop, k: float) -> float:
    """Midpoint-rule value of the free-period action of L + k."""
    return discrete_action(L, loop.nodes, loop.T, k)[0]


def _fold(loop, grad):
    g = np.array(grad)
    if loop.mode == CLOSED:
        g[0] += g[-1]
        g[-1] = 0.0
    else:
        g[0] = 0.0
        g[-1] = 0.0
    return g


def d_action(L, loop: FreeTimeLoop, k: float) -> LoopCotangent:
    """Differential of the action as pairing coefficients on admissible tangents.

    Closed loops carry the whole base-point coefficient on node 0 (node N
    moves with it); fixed loops have zero endpoint coefficients.
    """
    _, grad, dT, _, _ = discrete_action(L, loop.nodes, loop.T, k)
    return LoopCotangent(_fold(loop, grad), dT)


def segment_energy(L, loop: FreeTimeLoop) -> np.ndarray:
    """Energy at each segment midpoint with velocity N dx / T."""
    return discrete_action(L, loop.nodes, loop.T, 0.0)[3]


def el_residual(L, loop: FreeTimeLoop, k: float = 0.0) -> np.ndarray:
    """Discrete Euler-Lagrange residual on the free nodes, shape (n_free, d)."""
    g = discrete_action(L, loop.nodes, loop.T, k)[1]
    return _fold(loop, g)[_free_slice(loop)]


def _free_slice(loop):
    return slice(0, loop.N) if loop.mode == CLOSED else slice(1, loop.N)


def metric_dual(loop: FreeTimeLoop, cot: LoopCotangent, metric="weighted") -> LoopTangent:
    """Solve G t = cot for the tangent t, G the discrete loop metric.

    The node block is tridiagonal (cyclic for closed loops, with the
    base-point weight added to node 0); the period block is diagonal.
    """
    wT, f, g, m = _coeffs(metric, loop.T)
    N = loop.N
    if not (g > 0 and wT > 0 and np.isfinite(g) and (f > 0 or m > 0 or loop.mode != CLOSED)):
        raise NumericError(f"loop metric degenerate at T={loop.T:.6g} (g={g:.3e})")
    off = -g * N
    xi = np.zeros_like(loop.nodes)
    if loop.mode == CLOSED:
        n = N
        diag = np.full(n, 2 * g * N + m / N)
        diag[0] += f
        sub = np.full(n, off)
        sup = np.full(n, off)
        xi[:N] = kernels.cyclic_tridiag_solve(sub, diag, sup, cot.dx[:N])
        xi[N] = xi[0]
    else:
        n = N - 1
        diag = np.full(n, 2 * g * N + m / N)
        sub = np.full(n, off)
        sup = np.full(n, off)
        xi[1:N] = kernels.tridiag_solve(sub, diag, sup, cot.dx[1:N])
    if not np.all(np.isfinite(xi)):
        raise NumericError("non-finite metric solve")
    return LoopTangent(xi, float(cot.dT) / wT)


def metric_inner(loop: FreeTimeLoop, a: LoopTangent, b: LoopTangent, metric="weighted") -> float:
    """Discrete loop-metric inner product at the loop."""
    wT, f, g, m = _coeffs(metric, loop.T)
    N = loop.N
    base = f * float(a.xi[0] @ b.xi[0]) if loop.mode == CLOSED else 0.0
    da, db = np.diff(a.xi, axis=0), np.diff(b.xi, axis=0)
    mass = (m / N) * float(np.sum(a.xi[:N] * b.xi[:N])) if m else 0.0
    return wT * a.alpha * b.alpha + base + g * N * float(np.sum(da * db)) + mass


def h1_gradient(L, loop: FreeTimeLoop, k: float, metric="weighted") -> LoopTangent:
    """Gradient of the action under the weighted H1 metric."""
    return metric_dual(loop, d_action(L, loop, k), metric)


def grad_norm(L, loop: FreeTimeLoop, k: float, metric="weighted") -> float:
    cot = d_action(L, loop, k)
    t = metric_dual(loop, cot, metric)
    return float(np.sqrt(max(cot.pair(t), 0.0)))


# ---------------------------------------------------------------- geometry


def winding_class(loop: FreeTimeLoop) -> tuple:
    """Integer translation between the end and start lifts (closed mode)."""
    gap = loop.nodes[-1] - loop.nodes[0]
    if loop.mode == FIXED:
        return tuple(float(x) for x in gap)
    return tuple(int(x) for x in np.round(gap))


def loop_length(loop: FreeTimeLoop, manifold=None) -> float:
    """Polygonal length, weighted by the conformal factor at midpoints."""
    dx = np.linalg.norm(np.diff(loop.nodes, axis=0), axis=1)
    if manifold is None or manifold.is_flat:
        return float(np.sum(dx))
    mid = 0.5 * (loop.nodes[:-1] + loop.nodes[1:])
    return float(np.sum(np.exp(manifold.conformal.value(mid)) * dx))


def resample(loop: FreeTimeLoop, N: int) -> FreeTimeLoop:
    """Piecewise-linear resampling onto N uniform segments."""
    if N < 8:
        raise InvalidInputError("resample needs N >= 8")
    s_old = np.linspace(0.0, 1.0, loop.N + 1)
    s_new = np.linspace(0.0, 1.0, N + 1)
    nodes = np.column_stack([np.interp(s_new, s_old, loop.nodes[:, j]) for j in range(loop.dim)])
    nodes[0], nodes[-1] = loop.nodes[0], loop.nodes[-1]
    return FreeTimeLoop(nodes, loop.T, loop.mode)


def length_bound_from_action(action_bound, T_bound, k, a1, a2):
    """Upper bound for length**2 / T over loops with action <= A1 and T <= A2."""
    return (action_bound + (a2 + abs(k)) * T_bound) / a1 + 1.0


# ---------------------------------------------------------------- packing


def pack(loop: FreeTimeLoop, log_T=False) -> np.ndarray:
    """Free coordinates (nodes not pinned by the mode) followed by T."""
    T = np.log(loop.T) if log_T else loop.T
    return np.concatenate([loop.nodes[_free_slice(loop)].ravel(), [T]])


def unpack(template: FreeTimeLoop, vec, log_T=False) -> FreeTimeLoop:
    d = template.dim
    nodes = np.array(template.nodes)
    sl = _free_slice(template)
    nodes[sl] = np.asarray(vec[:-1]).reshape(-1, d)
    T = float(np.exp(vec[-1])) if log_T else float(vec[-1])
    return template.with_nodes(nodes, T)


def packed_gradient(L, loop: FreeTimeLoop, k: float) -> np.ndarray:
    """Euclidean gradient of the action w.r.t. :func:`pack` coordinates."""
    cot = d_action(L, loop, k)
    return np.concatenate([cot.dx[_free_slice(loop)].ravel(), [cot.dT]])


# ---------------------------------------------------------------- files


def write_loop(path, loop: FreeTimeLoop, extra: dict | None = None):
    """Write a loop with a key=value header and 17-digit rows."""
    lines = [
        f"# N={loop.N}",
        f"# T={loop.T:.17g}",
        "# winding=" + " ".join(f"{w:.17g}" if isinstance(w, float) else str(w) for w in loop.winding),
        f"# endpoint_mode={loop.mode}",
    ]
    for key, val in (extra or {}).items():
        lines.append(f"# {key}={val}")
    for row in loop.nodes:
        lines.append(" ".join(f"{x:.17g}" for x in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_loop(path) -> FreeTimeLoop:
    header = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                header[key.strip()] = val.strip()
            else:
                rows.append([float(x) for x in line.split()])
    try:
        N = int(header["N"])
        T = float(header["T"])
        mode = header.get("endpoint_mode", CLOSED)
    except (KeyError, ValueError) as exc:
        raise InvalidInputError(f"{path}: bad loop header ({exc})") from None
    nodes = np.array(rows)
    if nodes.shape[0] != N + 1:
        raise InvalidInputError(f"{path}: expected {N + 1} rows, found {nodes.shape[0]}")
    return FreeTimeLoop(nodes, T, mode)
