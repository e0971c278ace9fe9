"""Torus manifolds and Tonelli Lagrangians.

All fields live on the unit d-torus and are stored as finite Fourier series,
so periodicity is exact.  Lagrangians are evaluated on batches of points:
``x`` and ``v`` have shape ``(n, d)`` (a single point of shape ``(d,)`` is
also accepted and the outputs are squeezed accordingly).

The only concrete family shipped here is :class:`FourierLagrangian`,

    L(x, v) = 1/2 e^{2u(x)} |v|^2 + chi(|v|_x) * (psi(x) - <A(x), v>),

where ``chi`` is a C^1 cubic cutoff that switches the non-kinetic part off
between ``R`` and ``R + blend_width``.  Above that the Lagrangian is exactly
the Riemannian kinetic energy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


class InvalidInputError(ValueError):
    """Raised on non-finite or malformed arguments."""


class ConvexityError(ValueError):
    """Raised when a Lagrangian fails the uniform convexity test."""


class NumericError(RuntimeError):
    """Raised when an iterative numerical method fails."""


def _as_batch(x, v=None):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if v is not None:
        v = np.atleast_2d(np.asarray(v, dtype=float))
        if v.shape != x.shape:
            raise InvalidInputError(f"x and v shapes differ: {x.shape} vs {v.shape}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise InvalidInputError("non-finite point or velocity")
    elif not np.all(np.isfinite(x)):
        raise InvalidInputError("non-finite point")
    return x, v, single


@dataclass(frozen=True)
class FourierField:
    """Real scalar field ``const + sum c_m cos(2 pi k_m.x) + s_m sin(2 pi k_m.x)``."""

    dim: int
    waves: np.ndarray = None
    cos_coef: np.ndarray = None
    sin_coef: np.ndarray = None
    const: float = 0.0

    def __post_init__(self):
        waves = np.zeros((0, self.dim)) if self.waves is None else self.waves
        waves = np.asarray(waves, dtype=float).reshape(-1, self.dim)
        m = waves.shape[0]
        cc = np.zeros(m) if self.cos_coef is None else np.asarray(self.cos_coef, float)
        ss = np.zeros(m) if self.sin_coef is None else np.asarray(self.sin_coef, float)
        if cc.shape != (m,) or ss.shape != (m,):
            raise InvalidInputError("Fourier coefficient arrays must match the wave table")
        if np.any(waves != np.round(waves)):
            raise InvalidInputError("wave vectors must be integer for periodicity")
        for name, arr in (("waves", waves), ("cos_coef", cc), ("sin_coef", ss)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "const", float(self.const))

    @classmethod
    def zero(cls, dim):
        return cls(dim)

    @classmethod
    def from_terms(cls, dim, terms, const=0.0):
        """Build from ``(amplitude, 'cos'|'sin', wave)`` triples."""
        waves, cc, ss = [], [], []
        for amp, kind, wave in terms:
            if kind not in ("cos", "sin"):
                raise InvalidInputError(f"unknown Fourier term kind {kind!r}")
            wave = tuple(wave)
            if len(wave) != dim:
                raise InvalidInputError(f"wave {wave} has wrong dimension")
            waves.append(wave)
            cc.append(amp if kind == "cos" else 0.0)
            ss.append(amp if kind == "sin" else 0.0)
        return cls(dim, np.array(waves, float).reshape(-1, dim), np.array(cc), np.array(ss), const)

    def shifted(self, delta):
        return FourierField(self.dim, self.waves, self.cos_coef, self.sin_coef, self.const + delta)

    @property
    def is_zero(self):
        return self.const == 0.0 and not np.any(self.cos_coef) and not np.any(self.sin_coef)

    def _phase(self, x):
        return TWO_PI * (x @ self.waves.T)

    def value(self, x):
        x = np.atleast_2d(x)
        if self.waves.shape[0] == 0:
            return np.full(x.shape[0], self.const)
        ph = self._phase(x)
        return self.const + np.cos(ph) @ self.cos_coef + np.sin(ph) @ self.sin_coef

    def grad(self, x):
        x = np.atleast_2d(x)
        if self.waves.shape[0] == 0:
            return np.zeros_like(x)
        ph = self._phase(x)
        w = -np.sin(ph) * self.cos_coef + np.cos(ph) * self.sin_coef
        return TWO_PI * (w @ self.waves)

    def hess(self, x):
        x = np.atleast_2d(x)
        if self.waves.shape[0] == 0:
            return np.zeros((x.shape[0], self.dim, self.dim))
        ph = self._phase(x)
        w = np.cos(ph) * self.cos_coef + np.sin(ph) * self.sin_coef
        return -(TWO_PI**2) * np.einsum("nm,mi,mj->nij", w, self.waves, self.waves)

    def max_abs_bound(self):
        return abs(self.const) + np.sum(np.abs(self.cos_coef)) + np.sum(np.abs(self.sin_coef))


@dataclass(frozen=True)
class TorusManifold:
    """Unit d-torus with conformal metric ``e^{2u} * identity``."""

    dim: int = 2
    conformal: FourierField = None

    def __post_init__(self):
        if self.dim < 2:
            raise InvalidInputError("torus dimension must be >= 2")
        if self.conformal is None:
            object.__setattr__(self, "conformal", FourierField.zero(self.dim))

    @property
    def is_flat(self):
        return self.conformal.is_zero

    def metric(self, x):
        x, _, single = _as_batch(x)
        n = np.exp(2.0 * self.conformal.value(x))
        g = n[:, None, None] * np.eye(self.dim)
        return g[0] if single else g

    def christoffel(self, x):
        """Gamma[k, i, j] for the conformal metric (zero when flat)."""
        x, _, single = _as_batch(x)
        gu = self.conformal.grad(x)
        eye = np.eye(self.dim)
        gam = (
            np.einsum("ki,nj->nkij", eye, gu)
            + np.einsum("kj,ni->nkij", eye, gu)
            - np.einsum("ij,nk->nkij", eye, gu)
        )
        return gam[0] if single else gam

    def gaussian_curvature(self, x):
        """K = -e^{-2u} Laplacian(u); only meaningful for dim == 2."""
        x, _, single = _as_batch(x)
        lap = np.trace(self.conformal.hess(x), axis1=1, axis2=2)
        k = -np.exp(-2.0 * self.conformal.value(x)) * lap
        return k[0] if single else k


@dataclass(frozen=True)
class ConvexityConstants:
    a0: float
    A0: float
    b1: float
    b2: float
    b3: float


class TonelliLagrangian:
    """Base class.  Subclasses implement :meth:`_evaluate` on batches.

    Attributes ``dim`` and ``R`` (truncation radius) are required; ``manifold``
    supplies the Riemannian norm used in the convexity constants.
    """

    dim: int
    R: float
    manifold: TorusManifold
    blend_width: float = 0.0

    def _evaluate(self, x, v):
        raise NotImplementedError

    def evaluate(self, x, v):
        """Return ``(L, L_x, L_v, L_vv)``."""
        x, v, single = _as_batch(x, v)
        out = self._evaluate(x, v)
        if single:
            return tuple(o[0] for o in out)
        return out

    def value(self, x, v):
        return self.evaluate(x, v)[0]

    def energy(self, x, v):
        x, v, single = _as_batch(x, v)
        L, _, Lv, _ = self._evaluate(x, v)
        e = np.einsum("ni,ni->n", v, Lv) - L
        return e[0] if single else e

    def legendre(self, x, v):
        return self.evaluate(x, v)[2]

    def legendre_inverse(self, x, p, tol=1e-13, max_iter=60):
        """Solve ``L_v(x, v) = p`` for v by damped Newton."""
        x, p, single = _as_batch(x, p)
        v = self._legendre_guess(x, p)
        for _ in range(max_iter):
            _, _, Lv, Lvv = self._evaluate(x, v)
            r = Lv - p
            err = np.max(np.abs(r)) if r.size else 0.0
            if err <= tol * (1.0 + np.max(np.abs(p))):
                return v[0] if single else v
            step = np.linalg.solve(Lvv, r[..., None])[..., 0]
            lam = 1.0
            for _ in range(30):
                vt = v - lam * step
                rt = self._evaluate(x, vt)[2] - p
                if np.max(np.abs(rt)) < err:
                    break
                lam *= 0.5
            v = vt
        raise NumericError("Legendre inverse did not converge")

    def _legendre_guess(self, x, p):
        return p.copy()

    def mixed(self, x, v, h=1e-6):
        """L_xv[n, i, j] = d(L_v)_i / dx_j, by central differences."""
        x, v, single = _as_batch(x, v)
        out = np.empty((x.shape[0], self.dim, self.dim))
        for j in range(self.dim):
            e = np.zeros(self.dim)
            e[j] = h
            out[:, :, j] = (self._evaluate(x + e, v)[2] - self._evaluate(x - e, v)[2]) / (2 * h)
        return out[0] if single else out

    def acceleration(self, x, v):
        """Euler-Lagrange acceleration L_vv^{-1} (L_x - L_xv v)."""
        x, v, single = _as_batch(x, v)
        _, Lx, _, Lvv = self._evaluate(x, v)
        Lxv = self.mixed(x, v)
        rhs = Lx - np.einsum("nij,nj->ni", Lxv, v)
        a = np.linalg.solve(Lvv, rhs[..., None])[..., 0]
        return a[0] if single else a

    def psi(self, x):
        x, _, single = _as_batch(x)
        val = self._evaluate(x, np.zeros_like(x))[0]
        return val[0] if single else val

    def theta(self, x):
        """Coefficients of the one-form theta_x(v) = L_v(x, 0) . v."""
        x, _, single = _as_batch(x)
        val = self._evaluate(x, np.zeros_like(x))[2]
        return val[0] if single else val

    def conformal_factor(self, x):
        return np.exp(2.0 * self.manifold.conformal.value(np.atleast_2d(x)))

    def with_closed_form(self, lam):
        """Return L - <lam, v> for a constant one-form lam."""
        return ShiftedLagrangian(self, np.asarray(lam, float))


class ShiftedLagrangian(TonelliLagrangian):
    """Generic ``L(x, v) - <lam, v>`` wrapper."""

    def __init__(self, base, lam):
        self.base = base
        self.lam = np.asarray(lam, float)
        self.dim = base.dim
        self.R = base.R
        self.manifold = base.manifold
        self.blend_width = base.blend_width

    def _evaluate(self, x, v):
        L, Lx, Lv, Lvv = self.base._evaluate(x, v)
        return L - v @ self.lam, Lx, Lv - self.lam, Lvv

    def mixed(self, x, v, h=1e-6):
        return self.base.mixed(x, v, h)


def _blend(s, R, W):
    """C^1 cubic cutoff: 1 below R, 0 above R + W."""
    t = np.clip((s - R) / W, 0.0, 1.0)
    chi = 1.0 - 3.0 * t**2 + 2.0 * t**3
    inside = (t > 0.0) & (t < 1.0)
    dchi = np.where(inside, (-6.0 * t + 6.0 * t**2) / W, 0.0)
    d2chi = np.where(inside, (-6.0 + 12.0 * t) / W**2, 0.0)
    return chi, dchi, d2chi


class FourierLagrangian(TonelliLagrangian):
    """``1/2 e^{2u}|v|^2 + chi(|v|_x) (psi - <A, v>)`` with Fourier-series fields.

    ``potential`` is ``psi = L(x, 0)``; ``vector_potential`` is a list of d
    fields giving A.  The blend switches the non-kinetic part off across
    ``[R, R + blend_width]``.
    """

    def __init__(self, manifold, psi=None, vector_potential=None, R=100.0, blend_width=None, name="custom"):
        d = manifold.dim
        self.manifold = manifold
        self.dim = d
        self.name = name
        self.psi_field = FourierField.zero(d) if psi is None else psi
        if vector_potential is None:
            vector_potential = [FourierField.zero(d) for _ in range(d)]
        if len(vector_potential) != d:
            raise InvalidInputError("vector potential needs one field per dimension")
        self.A = list(vector_potential)
        if not R > 0:
            raise InvalidInputError("truncation radius must be positive")
        self.R = float(R)
        self.blend_width = float(R if blend_width is None else blend_width)
        if not self.blend_width > 0:
            raise InvalidInputError("blend width must be positive")

    # exact 1-form shift keeps the kernel fast path
    def with_closed_form(self, lam):
        lam = np.asarray(lam, float)
        A = [a.shifted(float(l)) for a, l in zip(self.A, lam)]
        return FourierLagrangian(self.manifold, self.psi_field, A, self.R, self.blend_width, self.name)

    def field_values(self, x):
        u = self.manifold.conformal
        return (
            u.value(x),
            u.grad(x),
            self.psi_field.value(x),
            self.psi_field.grad(x),
            np.stack([a.value(x) for a in self.A], axis=1),
            np.stack([a.grad(x) for a in self.A], axis=1),  # JA[n, i, j] = dA_i/dx_j
        )

    def _evaluate(self, x, v):
        d = self.dim
        u, gu, psi, gpsi, A, JA = self.field_values(x)
        n = np.exp(2.0 * u)
        v2 = np.einsum("ni,ni->n", v, v)
        s = np.sqrt(n * v2)
        chi, dchi, d2chi = _blend(s, self.R, self.blend_width)
        P = psi - np.einsum("ni,ni->n", A, v)
        safe = np.where(s > 0, s, 1.0)
        dsdv = (n / safe)[:, None] * v
        dPdx = gpsi - np.einsum("ni,nij->nj", v, JA)

        L = 0.5 * n * v2 + chi * P
        Lv = n[:, None] * v + (dchi * P)[:, None] * dsdv - chi[:, None] * A
        Lx = (n * v2 + dchi * P * s)[:, None] * gu + chi[:, None] * dPdx
        eye = np.eye(d)
        Lvv = n[:, None, None] * eye + np.zeros((x.shape[0], d, d))
        blend = dchi != 0.0
        if np.any(blend):
            ds = dsdv[blend]
            nb = n[blend][:, None, None]
            sb = safe[blend][:, None, None]
            d2s = (nb * eye - np.einsum("ni,nj->nij", ds, ds)) / sb
            Pb = P[blend][:, None, None]
            Ab = A[blend]
            Lvv[blend] += (
                d2chi[blend][:, None, None] * Pb * np.einsum("ni,nj->nij", ds, ds)
                + dchi[blend][:, None, None] * Pb * d2s
                - dchi[blend][:, None, None]
                * (np.einsum("ni,nj->nij", ds, Ab) + np.einsum("ni,nj->nij", Ab, ds))
            )
        return L, Lx, Lv, Lvv

    def mixed(self, x, v, h=1e-6):
        x, v, single = _as_batch(x, v)
        u, gu, _, _, _, JA = self.field_values(x)
        n = np.exp(2.0 * u)
        out = 2.0 * n[:, None, None] * np.einsum("ni,nj->nij", v, gu) - JA
        s = np.sqrt(n * np.einsum("ni,ni->n", v, v))
        outer = s > self.R
        if np.any(outer):
            out[outer] = TonelliLagrangian.mixed(self, x[outer], v[outer], h)
        return out[0] if single else out

    def _legendre_guess(self, x, p):
        u, _, _, _, A, _ = self.field_values(x)
        return (p + A) * np.exp(-2.0 * u)[:, None]

    def kernel_tables(self):
        """Packed arrays consumed by the compiled kernels."""
        d = self.dim
        u = self.manifold.conformal
        p = self.psi_field
        # merge all A components onto one wave table
        waves = []
        for a in self.A:
            for w in a.waves:
                t = tuple(w)
                if t not in waves:
                    waves.append(t)
        ma = len(waves)
        a_waves = np.array(waves, float).reshape(ma, d)
        a_cos = np.zeros((ma, d))
        a_sin = np.zeros((ma, d))
        for i, a in enumerate(self.A):
            for w, c, s in zip(a.waves, a.cos_coef, a.sin_coef):
                m = waves.index(tuple(w))
                a_cos[m, i] += c
                a_sin[m, i] += s
        a_const = np.array([a.const for a in self.A], float)
        return KernelTables(
            d,
            np.ascontiguousarray(u.waves, float).reshape(-1, d), np.ascontiguousarray(u.cos_coef),
            np.ascontiguousarray(u.sin_coef), u.const,
            np.ascontiguousarray(p.waves, float).reshape(-1, d), np.ascontiguousarray(p.cos_coef),
            np.ascontiguousarray(p.sin_coef), p.const,
            np.ascontiguousarray(a_waves), np.ascontiguousarray(a_cos), np.ascontiguousarray(a_sin),
            np.ascontiguousarray(a_const),
            self.R, self.blend_width,
        )


@dataclass(frozen=True)
class KernelTables:
    dim: int
    u_waves: np.ndarray
    u_cos: np.ndarray
    u_sin: np.ndarray
    u_const: float
    p_waves: np.ndarray
    p_cos: np.ndarray
    p_sin: np.ndarray
    p_const: float
    a_waves: np.ndarray
    a_cos: np.ndarray
    a_sin: np.ndarray
    a_const: np.ndarray
    R: float
    W: float

    def args(self):
        return (
            self.u_waves, self.u_cos, self.u_sin, self.u_const,
            self.p_waves, self.p_cos, self.p_sin, self.p_const,
            self.a_waves, self.a_cos, self.a_sin, self.a_const,
            self.R, self.W,
        )


# ---------------------------------------------------------------- built-ins


def free_particle(dim=2, R=100.0):
    """L = 1/2 |v|^2 on the flat torus."""
    return FourierLagrangian(TorusManifold(dim), R=R, name="free")


def mechanical(potential=None, dim=2, R=100.0, manifold=None):
    """L = 1/2 |v|^2 - V(x); default V = cos(2 pi x_1)."""
    if potential is None:
        wave = [0] * dim
        wave[0] = 1
        potential = FourierField.from_terms(dim, [(1.0, "cos", wave)])
    psi = FourierField(dim, potential.waves, -potential.cos_coef, -potential.sin_coef, -potential.const)
    return FourierLagrangian(manifold or TorusManifold(dim), psi=psi, R=R, name="mechanical")


def magnetic(epsilon=2.0, R=100.0):
    """Exact magnetic system L = 1/2 |v|^2 - <A, v> with A = (0, eps sin(2 pi x_1))."""
    A = [FourierField.zero(2), FourierField.from_terms(2, [(epsilon, "sin", (1, 0))])]
    return FourierLagrangian(TorusManifold(2), vector_potential=A, R=R, name="magnetic")


def reeb(R=100.0):
    """L = 1/2 |v - X|^2 with X = (sin 2 pi x_1, cos 2 pi x_1).

    X is a unit field whose closed leaves are the circles x_1 = 0 (moving up)
    and x_1 = 1/2 (moving down); between them leaves spiral from one to the
    other, forming two Reeb components.
    """
    A = [
        FourierField.from_terms(2, [(1.0, "sin", (1, 0))]),
        FourierField.from_terms(2, [(1.0, "cos", (1, 0))]),
    ]
    psi = FourierField(2, const=0.5)
    return FourierLagrangian(TorusManifold(2), psi=psi, vector_potential=A, R=R, name="reeb")


def reeb_field(x):
    x = np.atleast_2d(x)
    return np.stack([np.sin(TWO_PI * x[:, 0]), np.cos(TWO_PI * x[:, 0])], axis=1)


REEB_LEAVES = (0.0, 0.5)


# ------------------------------------------------------------ diagnostics


def _sample_points(L, budget, seed, v_max=None):
    rng = np.random.default_rng(seed)
    d = L.dim
    vmax = L.R + L.blend_width + 1.0 if v_max is None else float(v_max)
    nx = max(1, budget // 10)
    x = rng.random((budget, d))
    # a quarter of samples on a structured grid in x so that extrema of
    # single-mode fields are hit exactly
    g = 4 * int(np.ceil(nx ** (1.0 / d) / 4.0))
    grid = np.stack(np.meshgrid(*[np.arange(g) / g for _ in range(d)], indexing="ij"), -1)
    grid = grid.reshape(-1, d)[: budget // 4]
    x[: grid.shape[0]] = grid
    direction = rng.normal(size=(budget, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = vmax * rng.random(budget) ** 2
    radius[: budget // 10] = 0.0
    n = L.conformal_factor(x) if hasattr(L, "conformal_factor") else np.ones(budget)
    v = direction * (radius / np.sqrt(n))[:, None]
    return x, v, n


def convexity_constants(L, sample_budget=4000, seed=0, v_max=None):
    """Estimate a0, A0, b1, b2, b3 by sampling (x, v).

    Speeds range over ``|v|_x <= v_max``, by default ``R + W + 1`` so that the
    whole blend into the kinetic term is covered.  ``v_max = R`` restricts
    the estimate to the untruncated Lagrangian.
    """
    if sample_budget < 1000:
        raise InvalidInputError("sample_budget must be >= 1000")
    x, v, n = _sample_points(L, sample_budget, seed, v_max)
    _, Lx, _, Lvv = L.evaluate(x, v)
    eig = np.linalg.eigvalsh(Lvv) / n[:, None]
    a0 = float(np.min(eig))
    A0 = float(np.max(eig))
    if not a0 > 0:
        raise ConvexityError(f"L_vv not uniformly positive: estimated a0 = {a0:.3e}")
    zero = np.zeros_like(x)
    gpsi = np.empty_like(x)
    h = 1e-6
    for j in range(L.dim):
        e = np.zeros(L.dim)
        e[j] = h
        gpsi[:, j] = (L.evaluate(x + e, zero)[0] - L.evaluate(x - e, zero)[0]) / (2 * h)
    b1 = float(np.max(np.linalg.norm(gpsi, axis=1) / np.sqrt(n)))
    speed2 = n * np.einsum("ni,ni->n", v, v)
    b2 = float(np.max(np.linalg.norm(Lx, axis=1) / (1.0 + speed2)))
    Lxv = L.mixed(x, v)
    b3 = float(np.max(np.linalg.norm(Lxv, ord=2, axis=(1, 2)) / (1.0 + np.sqrt(speed2))))
    return ConvexityConstants(a0, A0, b1, b2, b3)


def quadratic_lower_constants(L, consts=None):
    """(a1, a2) with L >= a1 |v|^2 - a2, derived from the Lo sandwich."""
    consts = consts or convexity_constants(L)
    x, _, _ = _sample_points(L, 2000, 1)
    theta = np.linalg.norm(L.theta(x), axis=1)
    psi = L.psi(x)
    a1 = 0.25 * consts.a0
    # 1/2 a0 |v|^2 - |theta||v| >= 1/4 a0 |v|^2 - |theta|^2 / a0
    a2 = float(np.max(theta**2) / consts.a0 - np.min(psi))
    return a1, max(a2, 0.0)
