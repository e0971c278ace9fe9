import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from freeloop.systems import (
    ConvexityError,
    InvalidInputError,
    TonelliLagrangian,
    TorusManifold,
    convexity_constants,
    magnetic,
)

coord = st.floats(-3.0, 3.0, allow_nan=False)
speed = st.floats(-8.0, 8.0, allow_nan=False)
points = st.tuples(coord, coord)
vels = st.tuples(speed, speed)
NAMES = ["mechanical", "magnetic", "reeb", "free", "conformal", "mixed"]


def fd_derivs(L, x, v, h=1e-5):
    """Central differences of the value in x and v, and of L_v in v."""
    d = x.size
    Lx, Lv, Lvv = np.empty(d), np.empty(d), np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        Lx[j] = (L.value(x + e, v) - L.value(x - e, v)) / (2 * h)
        Lv[j] = (L.value(x, v + e) - L.value(x, v - e)) / (2 * h)
        Lvv[:, j] = (L.legendre(x, v + e) - L.legendre(x, v - e)) / (2 * h)
    return Lx, Lv, Lvv


def rel(a, b):
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


class Quartic(TonelliLagrangian):
    """|v|^4: fails uniform convexity at v = 0."""

    dim = 2
    R = 100.0
    manifold = TorusManifold(2)

    def _evaluate(self, x, v):
        s = np.einsum("ni,ni->n", v, v)
        Lv = 4 * s[:, None] * v
        Lvv = 4 * s[:, None, None] * np.eye(2) + 8 * np.einsum("ni,nj->nij", v, v)
        return s * s, np.zeros_like(x), Lv, Lvv


# ---------------------------------------------------------------- evaluation


def test_mechanical_rest_value(mech):
    val, Lx, Lv, Lvv = mech.evaluate([0.0, 0.0], [0.0, 0.0])
    assert val == pytest.approx(-1.0, abs=1e-15)
    assert np.all(Lv == 0.0)
    assert np.allclose(Lvv, np.eye(2))


@given(points, vels)
def test_magnetic_kinetic_matrix_is_identity(mag, x, v):
    Lvv = mag.evaluate(np.array(x), np.array(v))[3]
    assert np.allclose(Lvv, np.eye(2), atol=1e-14)


@pytest.mark.parametrize("name", NAMES)
@given(x=points, v=vels)
def test_derivatives_match_finite_differences(all_systems, name, x, v):
    L = all_systems[name]
    x, v = np.array(x), np.array(v)
    _, Lx, Lv, Lvv = L.evaluate(x, v)
    fx, fv, fvv = fd_derivs(L, x, v)
    assert rel(Lx, fx) <= 1e-6
    assert rel(Lv, fv) <= 1e-6
    assert rel(Lvv, fvv) <= 1e-6


@pytest.mark.parametrize("name", ["magnetic", "mixed", "reeb"])
@pytest.mark.parametrize("s", [99.9, 100.0, 150.0, 199.9, 200.0, 200.1])
def test_derivatives_consistent_across_truncation_blend(all_systems, name, s):
    L = all_systems[name]
    x = np.array([0.23, 0.61])
    u = np.array([0.6, 0.8])
    n = float(np.sqrt(L.conformal_factor(x)[0]))
    v = s * u / n
    _, Lx, Lv, Lvv = L.evaluate(x, v)
    fx, fv, fvv = fd_derivs(L, x, v, h=1e-4)
    assert rel(Lv, fv) <= 1e-6
    assert rel(Lx, fx) <= 1e-6
    # the blend is C1 only: L_vv jumps at the two knots
    if min(abs(s - L.R), abs(s - L.R - L.blend_width)) > 1e-3:
        assert rel(Lvv, fvv) <= 1e-5


@pytest.mark.parametrize("name", ["magnetic", "mixed", "reeb", "mechanical"])
def test_riemannian_at_infinity(all_systems, name, rng):
    L = all_systems[name]
    x = rng.random((50, 2))
    d = rng.normal(size=(50, 2))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    n = L.conformal_factor(x)
    speed = L.R + L.blend_width + 1.0 + 50 * rng.random(50)
    v = d * (speed / np.sqrt(n))[:, None]
    val = L.evaluate(x, v)[0]
    assert np.allclose(val, 0.5 * speed**2, rtol=1e-13)


def test_non_finite_input_rejected(mech):
    with pytest.raises(InvalidInputError):
        mech.evaluate([np.nan, 0.0], [0.0, 0.0])
    with pytest.raises(InvalidInputError):
        mech.energy([0.0, 0.0], [np.inf, 0.0])


@pytest.mark.parametrize("name", NAMES)
@given(x=points, v=vels, shift=st.tuples(st.integers(-5, 5), st.integers(-5, 5)))
def test_periodicity(all_systems, name, x, v, shift):
    L = all_systems[name]
    x, v = np.array(x), np.array(v)
    a = L.evaluate(x, v)
    b = L.evaluate(x + np.array(shift, float), v)
    for p, q in zip(a, b):
        assert np.allclose(p, q, rtol=1e-12, atol=1e-11)


# ---------------------------------------------------------------- energy


def test_magnetic_energy_cancels_linear_term(mag):
    assert mag.energy([0.37, 0.11], [3.0, 4.0]) == pytest.approx(12.5, rel=1e-14)


@pytest.mark.parametrize("name", NAMES)
def test_energy_at_rest_is_minus_psi(all_systems, name, rng):
    L = all_systems[name]
    x = rng.random((20, 2))
    assert np.allclose(L.energy(x, np.zeros_like(x)), -L.psi(x), atol=1e-14)


def test_mechanical_energy_at_rest(mech):
    assert mech.energy([0.0, 0.0], [0.0, 0.0]) == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("name", NAMES)
def test_sandwich_bounds(all_systems, name, rng):
    """Lo sandwich for L and E on 10^4 samples with the estimated a0, A0."""
    L = all_systems[name]
    c = convexity_constants(L)
    x = rng.random((10_000, 2))
    d = rng.normal(size=(10_000, 2))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    n = L.conformal_factor(x)
    s = (L.R + L.blend_width + 1.0) * rng.random(10_000) ** 3
    v = d * (s / np.sqrt(n))[:, None]
    val = L.evaluate(x, v)[0]
    E = L.energy(x, v)
    psi = L.psi(x)
    lin = np.einsum("ni,ni->n", L.theta(x), v)
    slack = 1e-9 * (1 + s**2)
    assert np.all(0.5 * c.a0 * s**2 + lin + psi <= val + slack)
    assert np.all(val <= 0.5 * c.A0 * s**2 + lin + psi + slack)
    assert np.all(-psi + 0.5 * c.a0 * s**2 <= E + slack)
    assert np.all(E <= -psi + 0.5 * c.A0 * s**2 + slack)


# ---------------------------------------------------------------- Legendre


def test_magnetic_legendre(mag, rng):
    x = rng.random((10, 2))
    v = rng.normal(size=(10, 2))
    A = np.column_stack([np.zeros(10), 2.0 * np.sin(2 * np.pi * x[:, 0])])
    assert np.allclose(mag.legendre(x, v), v - A, atol=1e-14)


def test_free_legendre_is_identity(free, rng):
    v = rng.normal(size=(10, 2))
    assert np.allclose(free.legendre(rng.random((10, 2)), v), v, atol=1e-15)


@pytest.mark.parametrize("name", NAMES)
def test_legendre_round_trip(all_systems, name, rng):
    L = all_systems[name]
    x = rng.random((100, 2))
    v = 5.0 * rng.normal(size=(100, 2))
    back = L.legendre_inverse(x, L.legendre(x, v))
    assert np.max(np.abs(back - v)) <= 1e-10


# ---------------------------------------------------------------- constants


def test_magnetic_constants_below_truncation():
    c = convexity_constants(magnetic(2.0), v_max=100.0)
    assert c.a0 == pytest.approx(1.0, abs=1e-12)
    assert c.A0 == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("name", NAMES)
def test_constants_positive_and_ordered(all_systems, name):
    c = convexity_constants(all_systems[name])
    assert 0 < c.a0 <= c.A0


def test_mechanical_b1_is_two_pi(mech):
    """Oracle: |dV| = 2 pi |sin 2 pi x1| peaks at 2 pi, hit by the sample grid."""
    assert convexity_constants(mech).b1 == pytest.approx(2 * np.pi, rel=1e-6)


def test_degenerate_lagrangian_rejected():
    with pytest.raises(ConvexityError):
        convexity_constants(Quartic())


def test_small_budget_rejected(mech):
    with pytest.raises(InvalidInputError):
        convexity_constants(mech, sample_budget=999)


# ---------------------------------------------------------------- manifold


@given(points)
def test_metric_is_spd(conformal, x):
    g = conformal.manifold.metric(np.array(x))
    assert np.allclose(g, g.T)
    assert np.all(np.linalg.eigvalsh(g) > 0)


def test_flat_christoffel_vanishes(rng):
    gam = TorusManifold(2).christoffel(rng.random((10, 2)))
    assert np.all(gam == 0.0)


def test_conformal_christoffel_matches_metric_derivative(conformal):
    """Gamma_kij = 1/2 g^kl (d_i g_lj + d_j g_li - d_l g_ij) by finite differences."""
    man = conformal.manifold
    x = np.array([0.31, 0.77])
    h = 1e-6
    dg = np.empty((2, 2, 2))
    for l in range(2):
        e = np.zeros(2)
        e[l] = h
        dg[l] = (man.metric(x + e) - man.metric(x - e)) / (2 * h)
    ginv = np.linalg.inv(man.metric(x))
    ref = 0.5 * (
        np.einsum("kl,ilj->kij", ginv, dg)
        + np.einsum("kl,jli->kij", ginv, dg)
        - np.einsum("kl,lij->kij", ginv, dg)
    )
    assert np.allclose(man.christoffel(x), ref, atol=1e-8)
