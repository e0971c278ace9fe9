"""Mountain-pass search between a constant loop and a negative-action loop.

The pieces are a parametric search for negative-action loops, the explicit
positive lower bound for the mountain-pass level, a string-method
relaxation of a path of loops, and an energy sweep that uses monotonicity
of the level in k.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .flow import (
    DescentOptions,
    OrbitSample,
    RefineFailed,
    closure_error,
    descend,
    initial_velocity,
    refine_critical,
    shoot_closed_orbit,
)
from .loops import (
    CLOSED,
    FIXED,
    FreeTimeLoop,
    action,
    d_action,
    discrete_action,
    loop_length,
    metric_dual,
    metric_inner,
    resample,
    LoopTangent,
)
from .systems import InvalidInputError, NumericError, convexity_constants


log = logging.getLogger(__name__)


class GeometryLost(RuntimeError):
    """The path maximum sits at an endpoint: no mountain-pass shape."""


# ---------------------------------------------------------------- families


def _circle_nodes(center, radius, N, orientation=1, start_angle=0.0):
    s = start_angle + 2 * np.pi * orientation * np.arange(N + 1) / N
    nodes = np.empty((N + 1, 2))
    nodes[:, 0] = center[0] + radius * np.cos(s)
    nodes[:, 1] = center[1] + radius * np.sin(s)
    nodes[-1] = nodes[0]
    return nodes


def optimal_period(L, nodes, k, mode=CLOSED, probes=(1.0, 2.0, 4.0)):
    """Minimise the action over T for fixed nodes.

    Below the truncation radius the discrete action is exactly
    ``a / T + b + c T``; three evaluations pin a, b, c.  The probe periods
    are multiples of the smallest period keeping every segment speed under a
    quarter of the truncation radius.  Returns ``(T_best, S_best)``; when
    c <= 0 the action is unbounded below in T and a period giving negative
    action is returned instead.
    """
    N = nodes.shape[0] - 1
    seg = float(np.max(np.linalg.norm(np.diff(nodes, axis=0), axis=1))) if N else 0.0
    R = getattr(L, "R", math.inf)
    t_min = 4.0 * N * seg / R * _conformal_sup(L)
    t0 = max(0.5, t_min)
    probes = tuple(t0 * p for p in probes)
    S = np.array([discrete_action(L, nodes, T, k)[0] for T in probes])
    A = np.array([[1.0 / T, 1.0, T] for T in probes])
    a, b, c = np.linalg.solve(A, S)
    a = max(a, 0.0)
    if c > 1e-14:
        T = math.sqrt(a / c) if a > 0 else 1e-3
        T = max(T, 1e-3, t_min)
    else:
        T = (abs(b) + 1.0) / max(-c, 1e-12) + math.sqrt(a / max(-c, 1e-12)) + 1.0
    T = float(min(T, 1e6))
    return T, discrete_action(L, nodes, T, k)[0]


def _conformal_sup(L):
    man = getattr(L, "manifold", None)
    if man is None or man.is_flat:
        return 1.0
    return math.exp(man.conformal.max_abs_bound())


def _candidates(L, k, base, N):
    """Yield (family rank, size, nodes, mode).

    Circles and constant loops have rank 0, long rectangles rank 1; size is
    the rectangle height (0 for compact candidates).
    """
    d = L.dim
    if d != 2:
        raise InvalidInputError("negative-loop search is implemented for d = 2")
    radii = np.geomspace(0.01, 0.3, 12)
    if base is None:
        centers = [(i / 8, j / 8) for i in range(8) for j in range(8)]
        for c in centers:
            for r in radii:
                for o in (1, -1):
                    yield 0, 0.0, _circle_nodes(c, r, N, o), CLOSED
        for a in np.arange(8) / 8:
            for width in (0.25, 0.5):
                for D in np.geomspace(1.0, 2048.0, 12):
                    for o in (1, -1):
                        b = a + width
                        vert = [[a, 0], [a, D], [b, D], [b, 0], [a, 0]]
                        if o < 0:
                            vert = vert[::-1]
                        n = int(min(max(N, 4 * (2 * D + 2 * width)), 16384))
                        yield 1, D, FreeTimeLoop.polygon(vert, 1.0, n).nodes, CLOSED
        x = np.stack(np.meshgrid(np.arange(32) / 32, np.arange(32) / 32, indexing="ij"), -1).reshape(-1, 2)
        q = x[np.argmin(L.psi(x))]
        yield 0, 0.0, np.tile(q, (N + 1, 1)), CLOSED
    else:
        q0 = np.asarray(base, float)
        for r in radii:
            for phi in np.arange(8) * np.pi / 4:
                for o in (1, -1):
                    center = q0 - r * np.array([np.cos(phi), np.sin(phi)])
                    yield 0, 0.0, _circle_nodes(center, r, N, o, phi), FIXED
        yield 0, 0.0, np.tile(q0, (N + 1, 1)), FIXED


def find_negative_action_loop(L, k, base=None, N=64, polish_iter=20, tol=1e-12):
    """Search for a contractible loop with negative action of L + k.

    Candidates are circles (a grid of centres and radii, both orientations),
    the constant loop at the minimum of psi, and long rectangles bounded by
    two vertical lines.  Each candidate gets its action minimised over T in
    closed form.  Compact candidates win when any is negative (most negative
    first); otherwise the shortest negative rectangle is taken.  A short
    descent at fixed winding then lowers the action further as long as the
    loop does not grow by more than half its length.  Returns ``None`` when
    nothing negative is found.
    """
    best = None
    for rank, size, nodes, mode in _candidates(L, k, base, N):
        if best is not None and (rank, size) > best[0][:2]:
            break
        T, S = optimal_period(L, nodes, k, mode)
        key = (rank, size, S)
        if S < -tol and (best is None or key < best[0]):
            best = (key, nodes, T, mode)
    if best is None:
        return None
    (_, _, S), nodes, T, mode = best
    loop = FreeTimeLoop(nodes, T, mode)
    if polish_iter:
        st = descend(L, k, loop, DescentOptions(max_iter=polish_iter, gtol=1e-10))
        cand = st.loop
        if (
            st.action < S
            and cand.winding == loop.winding
            and 1e-3 < cand.T < 1e3
            and loop_length(cand) <= 1.5 * loop_length(loop) + 1e-12
        ):
            loop = cand
    return loop


# ---------------------------------------------------------------- threshold


def mountain_pass_threshold(a, b, gap, ell0):
    """``ell0 * (sqrt(2 a gap) - b ell0)``: lower bound for the path maximum."""
    return ell0 * (math.sqrt(2.0 * a * gap) - b * ell0)


def admissible_length(a, b, gap, half_diameter):
    """Half of the supremum allowed for the probing length ell0."""
    return 0.5 * min(half_diameter, math.sqrt(a * gap / (2.0 * b * b)))


@dataclass
class ThresholdData:
    c: float
    a: float
    b: float
    d1: float
    ell0: float
    radius: float


B_MIN = 1e-12


def _curl_bound(L, centers, radius, samples=4096, seed=0):
    """Sup of |d theta| in the metric over balls of the given radius."""
    rng = np.random.default_rng(seed)
    pts = []
    for c in np.atleast_2d(centers):
        r = radius * np.sqrt(rng.random(samples))
        ang = 2 * np.pi * rng.random(samples)
        pts.append(c + np.column_stack([r * np.cos(ang), r * np.sin(ang)]))
    x = np.vstack(pts)
    h = 1e-6
    th = []
    for j in range(L.dim):
        e = np.zeros(L.dim)
        e[j] = h
        th.append((L.theta(x + e) - L.theta(x - e)) / (2 * h))  # th[j][n, i] = d theta_i / dx_j
    J = np.stack(th, axis=2)  # J[n, i, j]
    curl = J - np.transpose(J, (0, 2, 1))
    norm = np.linalg.norm(curl, ord=2, axis=(1, 2))
    n = L.conformal_factor(x)
    return max(float(np.max(norm / n)), B_MIN)


def lower_bound_c(L, k, q0=None, consts=None, return_data=False):
    """Positive lower bound for the mountain-pass level at energy k.

    With a base point q0 this needs k > E(q0, 0); d1 is taken halfway.  With
    ``q0=None`` (free loops) it needs k > e0 and uses e0 in place of d1.
    """
    consts = consts or convexity_constants(L)
    a = consts.a0
    u = L.manifold.conformal
    grid = np.stack(np.meshgrid(np.arange(64) / 64, np.arange(64) / 64, indexing="ij"), -1).reshape(-1, 2)
    uvals = u.value(grid)
    # chart balls of the unit torus have radius < 1/2; conformal distortion shrinks them
    distortion = math.exp(float(np.min(uvals) - np.max(uvals)))
    if q0 is not None:
        q0 = np.asarray(q0, float)
        e_q0 = -float(L.psi(q0))
        if not k > e_q0:
            raise InvalidInputError(f"need k > E(q0, 0) = {e_q0:.6g}")
        d1 = 0.5 * (e_q0 + k)
        # largest ball around q0 where psi >= -d1
        radius = 0.5 * distortion
        dirs = np.linspace(0, 2 * np.pi, 64, endpoint=False)
        for r in np.linspace(0.0, 0.5, 201)[1:]:
            ring = q0 + r * np.column_stack([np.cos(dirs), np.sin(dirs)])
            if np.any(L.psi(ring) < -d1):
                radius = min(radius, r)
                break
        b = _curl_bound(L, q0, radius)
        half_diam = radius
    else:
        e0 = float(np.max(-L.psi(grid)))
        if not k > e0:
            raise InvalidInputError(f"need k > e0 = {e0:.6g}")
        d1 = e0
        radius = 0.25 * distortion
        b = _curl_bound(L, grid[::37], 0.5)
        half_diam = radius
    gap = k - d1
    ell0 = admissible_length(a, b, gap, half_diam)
    c = mountain_pass_threshold(a, b, gap, ell0)
    if return_data:
        return ThresholdData(c, a, b, d1, ell0, radius)
    return c


# ---------------------------------------------------------------- paths


@dataclass
class PathOfLoops:
    """Loops Gamma(s_0..s_{M-1}); the two ends stay fixed during relaxation."""

    images: list

    def __post_init__(self):
        if len(self.images) < 2:
            raise InvalidInputError("a path needs at least two images")
        w = self.images[0].winding
        modes = {im.mode for im in self.images}
        if len(modes) != 1 or any(im.winding != w for im in self.images):
            raise InvalidInputError("path images must share mode and winding class")

    def __len__(self):
        return len(self.images)

    def actions(self, L, k):
        return np.array([action(L, im, k) for im in self.images])


def _interp(a: FreeTimeLoop, b: FreeTimeLoop, t: float) -> FreeTimeLoop:
    nodes = (1 - t) * a.nodes + t * b.nodes
    T = math.exp((1 - t) * math.log(a.T) + t * math.log(b.T))
    return FreeTimeLoop(nodes, T, a.mode)


def init_path(const_loop: FreeTimeLoop, neg_loop: FreeTimeLoop, M_images=33, L=None, k=None) -> PathOfLoops:
    """Straight interpolation of nodes with T interpolated logarithmically.

    With ``L`` and ``k`` given, each interior image instead gets the period
    minimising its action (kept within the endpoint periods' range, widened
    by a factor 10), which lowers the initial path maximum considerably.
    """
    if const_loop.winding != neg_loop.winding or const_loop.mode != neg_loop.mode:
        raise InvalidInputError("endpoint loops must share winding class and mode")
    if const_loop.N != neg_loop.N:
        const_loop = FreeTimeLoop(np.tile(const_loop.nodes[0], (neg_loop.N + 1, 1)), const_loop.T, const_loop.mode)
    if M_images < 2:
        raise InvalidInputError("M_images must be >= 2")
    ts = np.linspace(0.0, 1.0, M_images)
    images = [const_loop] + [_interp(const_loop, neg_loop, t) for t in ts[1:-1]] + [neg_loop]
    if L is not None:
        lo = 0.1 * min(const_loop.T, neg_loop.T)
        hi = 10.0 * max(const_loop.T, neg_loop.T)
        for i in range(1, M_images - 1):
            im = images[i]
            T, _ = optimal_period(L, im.nodes, k, im.mode)
            images[i] = im.with_T(float(np.clip(T, lo, hi)))
    return PathOfLoops(images)


def _uniform_speed(nodes):
    """Reparametrise a polygonal loop by arc length (same node count)."""
    seg = np.linalg.norm(np.diff(nodes, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] <= 0:
        return nodes
    s_new = np.linspace(0.0, cum[-1], nodes.shape[0])
    out = np.column_stack([np.interp(s_new, cum, nodes[:, j]) for j in range(nodes.shape[1])])
    out[0], out[-1] = nodes[0], nodes[-1]
    return out


def stretch_path(const_loop: FreeTimeLoop, neg_loop: FreeTimeLoop, M_images, L, k) -> PathOfLoops:
    """Two-phase path for elongated loops: open the short axis, then the long one.

    Homothetic shrinking of a long thin loop passes through loops whose
    length is large but whose enclosed flux is small, which puts a huge
    barrier on the straight path.  Scaling the axes one after the other
    keeps the flux growing with the length.  Periods are optimised per image.
    """
    if const_loop.N != neg_loop.N:
        const_loop = FreeTimeLoop(np.tile(const_loop.nodes[0], (neg_loop.N + 1, 1)), const_loop.T, const_loop.mode)
    nodes = neg_loop.nodes
    center = nodes[:-1].mean(axis=0)
    ext = np.ptp(nodes, axis=0)
    order = np.argsort(ext)  # short axes first
    m1 = max(2, (M_images - 1) // 4)
    ts = np.linspace(0.0, 1.0, M_images)[1:-1]
    images = [const_loop]
    lo = 0.1 * min(const_loop.T, neg_loop.T)
    hi = 10.0 * max(const_loop.T, neg_loop.T)
    for t in ts:
        scale = np.zeros(nodes.shape[1])
        u = t * (M_images - 1) / m1
        if u <= 1.0:
            scale[order[:-1]] = u
        else:
            scale[order[:-1]] = 1.0
            scale[order[-1]] = (t * (M_images - 1) - m1) / (M_images - 1 - m1)
        nd = _uniform_speed(center + (nodes - center) * scale)
        T, _ = optimal_period(L, nd, k, neg_loop.mode)
        images.append(FreeTimeLoop(nd, float(np.clip(T, lo, hi)), neg_loop.mode))
    images.append(neg_loop)
    return PathOfLoops(images)


def constant_start(L, k, neg_loop: FreeTimeLoop, fraction=1e-3) -> FreeTimeLoop:
    """Constant loop at the node mean (or base point) sharing the node count.

    Its period is 0.1 T1, lowered if needed so that its action stays below
    ``fraction * |A(Gamma(1))|``; a constant loop of small period sits at the
    bottom of the mountain pass.
    """
    if neg_loop.mode == FIXED:
        q = neg_loop.nodes[0]
    else:
        q = neg_loop.nodes[:-1].mean(axis=0)
    rate = abs(float(L.psi(q)) + k)
    T = 0.1 * neg_loop.T
    budget = fraction * abs(action(L, neg_loop, k))
    if rate * T > budget and rate > 0:
        T = max(budget / rate, 1e-6)
    return FreeTimeLoop(np.tile(q, (neg_loop.N + 1, 1)), T, neg_loop.mode)


def _distance(a, b):
    return math.sqrt(float(np.mean(np.sum((a.nodes - b.nodes) ** 2, axis=1))) + (math.log(a.T) - math.log(b.T)) ** 2)


def equidistribute(path: PathOfLoops) -> PathOfLoops:
    """Redistribute interior images uniformly in loop-space arc length."""
    ims = path.images
    seg = np.array([_distance(a, b) for a, b in zip(ims[:-1], ims[1:])])
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] == 0:
        return path
    targets = np.linspace(0.0, cum[-1], len(ims))
    new = [ims[0]]
    for t in targets[1:-1]:
        j = int(np.clip(np.searchsorted(cum, t, side="right") - 1, 0, len(ims) - 2))
        w = (t - cum[j]) / seg[j] if seg[j] > 0 else 0.0
        new.append(_interp(ims[j], ims[j + 1], float(np.clip(w, 0.0, 1.0))))
    new.append(ims[-1])
    return PathOfLoops(new)


def _bump(t):
    """1 for t <= 1, 0 for t >= 2, smoothstep in between."""
    t = np.clip(t - 1.0, 0.0, 1.0)
    return 1.0 - t * t * (3.0 - 2.0 * t)


@dataclass
class MinimaxOptions:
    max_outer: int = 400
    gtol: float = 1e-4
    reparam_every: int = 5
    band: float = 0.05
    metric: str = "capped"
    climb: bool = True
    refine_N: int = 256
    refine_tol: float = 1e-9
    verify_dt: float = 1e-4
    closure_tol: float = 1e-5
    hessian: bool = True
    conjugate: bool = False
    handoff: float = 0.1
    match_tol: float = 1e-2


@dataclass
class MinimaxResult:
    level: float
    argmax: FreeTimeLoop
    loop: FreeTimeLoop | None
    verified: bool
    reason: str
    residuals: object = None
    orbit: OrbitSample | None = None
    closure: float | None = None
    bottom_eigenvalue: float | None = None
    period_bound: float | None = None
    path: PathOfLoops | None = None
    path_max: float | None = None
    iterations: int = 0
    extra: dict = field(default_factory=dict)


def _descent_step(L, k, loop, metric, step, g_tan=None, climb_tan=None):
    """One Armijo step (or a guarded climbing step); returns (loop, S, step)."""
    cot = d_action(L, loop, k)
    tan = metric_dual(loop, cot, metric)
    S = action(L, loop, k)
    if climb_tan is not None:
        # reverse the component along the path; keep a move only if it
        # lowers the gradient norm, since there is no merit function to test
        proj = metric_inner(loop, tan, climb_tan, metric)
        direction = LoopTangent(tan.xi - 2 * proj * climb_tan.xi, tan.alpha - 2 * proj * climb_tan.alpha)
        g0 = cot.pair(tan)
        while step > 1e-14:
            T = loop.T - step * direction.alpha
            if T > 0:
                new = loop.with_nodes(loop.nodes - step * direction.xi, T)
                cn = d_action(L, new, k)
                if cn.pair(metric_dual(new, cn, metric)) < g0:
                    return new, action(L, new, k), step
            step *= 0.5
        return loop, S, step
    g2 = cot.pair(tan)
    while step > 1e-14:
        T = loop.T - step * tan.alpha
        if T > 0:
            new = loop.with_nodes(loop.nodes - step * tan.xi, T)
            Sn = action(L, new, k)
            if Sn <= S - 0.5 * step * g2:
                return new, Sn, step
        step *= 0.5
    return loop, S, step


def _unit_tangent(path, i, metric):
    a, b = path.images[i - 1], path.images[i + 1]
    here = path.images[i]
    t = LoopTangent(b.nodes - a.nodes, b.T - a.T)
    n = math.sqrt(max(metric_inner(here, t, t, metric), 1e-300))
    return LoopTangent(t.xi / n, t.alpha / n)


def relax_minimax(L, k, path: PathOfLoops, opts: MinimaxOptions | None = None) -> MinimaxResult:
    """String-method relaxation of a mountain-pass path, then Newton refinement.

    Interior images move along minus the loop-metric gradient with a step
    factor equal to a smooth bump of (path max - action) / band: images near
    the maximum move freely, images far below stay put.  Every
    ``reparam_every`` iterations the images are redistributed uniformly in
    arc length.  The top image optionally climbs (its gradient component
    along the path is reversed).  Raises :class:`GeometryLost` as soon as
    the maximum sits at an endpoint.
    """
    opts = opts or MinimaxOptions()
    M = len(path)
    S = path.actions(L, k)
    steps = np.full(M, 1e-2)
    imax = int(np.argmax(S))

    def check(S):
        i = int(np.argmax(S))
        if i == 0 or i == M - 1:
            raise GeometryLost(
                f"path maximum at endpoint (endpoint actions {S[0]:.4g}, {S[-1]:.4g}; max {S.max():.4g})"
            )
        return i

    imax = check(S)
    it = 0
    gn = math.inf
    for it in range(1, opts.max_outer + 1):
        Smax = S[imax]
        scale = max(Smax - max(S[0], S[-1]), 1e-12)
        images = list(path.images)
        for i in range(1, M - 1):
            if opts.climb and i == imax and it > 20:
                tau = _unit_tangent(path, i, opts.metric)
                images[i], S[i], steps[i] = _descent_step(L, k, images[i], opts.metric, steps[i], climb_tan=tau)
                continue
            h = float(_bump((Smax - S[i]) / (opts.band * scale)))
            if h <= 0:
                continue
            new, Sn, st = _descent_step(L, k, images[i], opts.metric, max(steps[i] * h, 1e-14))
            images[i], S[i] = new, Sn
            steps[i] = min(2 * st / max(h, 1e-12), 1.0)
        path = PathOfLoops(images)
        if it % opts.reparam_every == 0:
            path = equidistribute(path)
            S = path.actions(L, k)
        imax = check(S)
        top = path.images[imax]
        cot = d_action(L, top, k)
        gn = math.sqrt(max(cot.pair(metric_dual(top, cot, opts.metric)), 0.0))
        log.debug("minimax it=%d max=%.6g at %d T=%.4g grad=%.3e", it, S[imax], imax, top.T, gn)
        if gn <= opts.gtol:
            break
        if gn <= opts.handoff and it % opts.reparam_every == 0:
            result = _result(path, S, imax, it, gn)
            result = finish_critical(L, k, top, opts, result)
            if result.reason != "refine-failed" and abs(result.level - S[imax]) <= 0.5 * scale:
                return result
    top = path.images[imax]
    return finish_critical(L, k, top, opts, _result(path, S, imax, it, gn))


def _result(path, S, imax, it, gn):
    top = path.images[imax]
    res = MinimaxResult(float(S[imax]), top, None, False, "unrefined", path=path, path_max=float(S[imax]), iterations=it)
    res.extra["top_grad"] = gn
    return res


def finish_critical(L, k, top: FreeTimeLoop, opts: MinimaxOptions, result: MinimaxResult) -> MinimaxResult:
    """Refine at ``refine_N`` nodes, then verify by EL re-integration."""
    from .jacobi import hessian_spectrum

    start = resample(top, opts.refine_N) if top.N != opts.refine_N else top
    try:
        loop, res = refine_critical(L, k, start, tol=opts.refine_tol)
    except RefineFailed as exc:
        result.reason = "refine-failed"
        result.residuals = exc.residuals
        return result
    result.loop = loop
    result.residuals = res
    result.level = action(L, loop, k)
    ok = res.el_residual <= opts.refine_tol and res.energy_error <= opts.refine_tol
    if loop.mode == CLOSED:
        try:
            ce, _ = closure_error(L, loop, dt=opts.verify_dt)
            result.extra["discrete_closure"] = ce
            v0 = initial_velocity(L, loop)
            x0, v1, T, _ = shoot_closed_orbit(L, k, loop.nodes[0], v0, loop.T, loop.winding, dt=opts.verify_dt)
            # independent re-integration at half the shooting step
            result.closure, result.orbit = closure_error(L, loop.with_T(T), x0, v1, dt=0.5 * opts.verify_dt)
            # same orbit as the discrete loop, up to the O(h^2) discretisation gap
            offset = float(np.linalg.norm(x0 - loop.nodes[0]) + np.linalg.norm(v1 - v0) + abs(T - loop.T))
            offset /= 1.0 + float(np.linalg.norm(v0)) + loop.T
            result.extra["orbit_offset"] = offset
            result.extra["orbit_energy_dev"] = float(np.max(np.abs(result.orbit.E - k)))
            result.extra["shooting_period"] = float(T)
            ok = (
                ok
                and result.closure <= opts.closure_tol
                and result.extra["orbit_energy_dev"] <= 1e-5
                and offset <= opts.match_tol
            )
        except NumericError as exc:
            result.reason = f"verify-failed: {exc}"
            return result
    if opts.hessian:
        try:
            result.bottom_eigenvalue = float(hessian_spectrum(L, k, loop, 1)[0])
        except (NumericError, np.linalg.LinAlgError):
            result.bottom_eigenvalue = None
    result.verified = bool(ok)
    result.reason = "verified" if ok else "verification-tolerance"
    return result


def mountain_pass(L, k, base=None, M_images=33, opts=None, N=64, neg_loop=None, warm=None):
    """Negative-loop search, path construction and relaxation in one call."""
    opts = opts or MinimaxOptions()
    neg = neg_loop if neg_loop is not None else find_negative_action_loop(L, k, base, N)
    if neg is None:
        raise GeometryLost("no negative-action loop found")
    # never coarsen the negative loop: long loops need their resolution
    N = max(N, neg.N)
    neg = resample(neg, N) if neg.N != N else neg
    const = constant_start(L, k, neg)
    if warm is not None:
        mid = warm
        if mid.N != N:
            mid = resample(mid, N)
        if mid.mode == neg.mode and mid.winding == neg.winding:
            # the previous saddle stays where it is: moving it can put it in a
            # region of opposite field where it is no longer near a saddle
            half = (M_images + 1) // 2
            p1 = init_path(const, mid, half, L, k)
            p2 = init_path(mid, neg, M_images - half + 1, L, k)
            path = PathOfLoops(p1.images + p2.images[1:])
            try:
                res = relax_minimax(L, k, path, opts)
                if res.verified:
                    return res
            except GeometryLost:
                pass
    ext = np.ptp(neg.nodes, axis=0)
    if ext.max() > 4.0 * max(ext.min(), 1e-12):
        path = stretch_path(const, neg, M_images, L, k)
    else:
        path = init_path(const, neg, M_images, L, k)
    return relax_minimax(L, k, path, opts)


# ---------------------------------------------------------------- sweep


@dataclass
class SweepRecord:
    k: float
    level: float
    success: bool
    T: float
    action: float
    bottom_eigenvalue: float
    slope: float = float("nan")
    period_ok: bool = False
    reason: str = ""
    loop: FreeTimeLoop | None = None
    result: MinimaxResult | None = None


def slope_estimates(ks, levels, lo=0.1, hi=1e3):
    """Symmetric-difference slope of the level curve, clamped to [lo, hi]."""
    ks = np.asarray(ks, float)
    c = np.asarray(levels, float)
    out = np.full(ks.size, np.nan)
    for i in range(ks.size):
        j0, j1 = max(i - 1, 0), min(i + 1, ks.size - 1)
        while j0 < i and not np.isfinite(c[j0]):
            j0 += 1
        while j1 > i and not np.isfinite(c[j1]):
            j1 -= 1
        dk = ks[j1] - ks[j0]
        s = (c[j1] - c[j0]) / dk if dk > 0 and np.isfinite(c[j1]) and np.isfinite(c[j0]) else lo
        out[i] = float(np.clip(s, lo, hi))
    return out


def struwe_sweep(L, k_range, grid_size, opts=None, M_images=17, N=64):
    """Mountain-pass levels over a grid of energies with warm starts.

    Each k reuses the previous saddle as the middle of its initial path.
    The Lipschitz slope M(k) of the level curve is estimated by symmetric
    differences (clamped to [0.1, 1e3]) and orbits are accepted only when
    their period is at most M(k) + 2.  A repeated energy reuses the record
    of its first occurrence, so the output is a function of k.
    """
    if grid_size < 2:
        raise InvalidInputError("grid_size must be >= 2")
    k0, k1 = map(float, k_range)
    if k1 < k0:
        raise InvalidInputError("empty k range")
    ks = np.linspace(k0, k1, grid_size)
    opts = opts or MinimaxOptions()
    records = []
    warm = None
    for k in ks:
        if records and records[-1].k == k:
            records.append(replace(records[-1]))
            continue
        try:
            res = mountain_pass(L, k, None, M_images, opts, N, warm=warm)
        except (GeometryLost, NumericError, InvalidInputError) as exc:
            records.append(SweepRecord(k, float("nan"), False, float("nan"), float("nan"), float("nan"), reason=str(exc)))
            continue
        lp = res.loop if res.loop is not None else res.argmax
        ok = res.verified and res.level > 0
        if ok:
            warm = res.loop
        records.append(
            SweepRecord(
                k,
                res.level,
                ok,
                lp.T,
                res.level,
                float("nan") if res.bottom_eigenvalue is None else res.bottom_eigenvalue,
                reason=res.reason,
                loop=lp,
                result=res,
            )
        )
    _repair_monotone(L, records, opts, M_images, N)
    levels = [r.level if r.success else np.nan for r in records]
    slopes = slope_estimates(ks, levels)
    for r, m in zip(records, slopes):
        r.slope = float(m)
        r.period_ok = bool(r.success and r.T <= m + 2.0)
        if r.success and not r.period_ok:
            r.success = False
            r.reason = "period-bound"
    return records


def _repair_monotone(L, records, opts, M_images, N, tol=1e-9):
    """Redo, without warm start, any level above a later one.

    A warm start can land on a higher critical point; the cold path gives an
    independent candidate and the lower verified level wins.  A level that
    still breaks monotonicity is marked as failed.
    """
    for i, r in enumerate(records):
        if not r.success:
            continue
        later = [q.level for q in records[i + 1 :] if q.success]
        if not later or r.level <= min(later) + tol:
            continue
        try:
            res = mountain_pass(L, r.k, None, M_images, opts, N)
        except (GeometryLost, NumericError, InvalidInputError):
            res = None
        if res is not None and res.verified and 0 < res.level < r.level:
            lp = res.loop
            bottom = float("nan") if res.bottom_eigenvalue is None else res.bottom_eigenvalue
            records[i] = SweepRecord(r.k, res.level, True, lp.T, res.level, bottom, reason="verified-cold", loop=lp, result=res)
    for i, r in enumerate(records):
        later = [q.level for q in records[i + 1 :] if q.success]
        earlier = [q.level for q in records[:i] if q.success]
        if r.success and ((later and r.level > min(later) + tol) or (earlier and r.level < max(earlier) - tol)):
            r.success = False
            r.reason = "non-monotone"


def write_sweep_csv(path, records, seed=None):
    import csv

    with open(path, "w", newline="") as fh:
        if seed is not None:
            fh.write(f"# seed={seed}\n")
        w = csv.writer(fh)
        w.writerow(["k", "c(k)", "success", "T", "action", "bottom_eigenvalue"])
        for r in records:
            w.writerow([f"{r.k:.17g}", f"{r.level:.17g}", int(r.success), f"{r.T:.17g}", f"{r.action:.17g}", f"{r.bottom_eigenvalue:.17g}"])
