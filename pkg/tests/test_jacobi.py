import numpy as np
import pytest

from freeloop.flow import integrate_el, packed_gradient, refine_critical
from freeloop.jacobi import (
    conjugate_scan,
    discrete_hessian,
    hessian_spectrum,
    jacobi_bound_check,
    linearized_flow,
    metric_matrix,
)
from freeloop.loops import FreeTimeLoop, action, pack, unpack
from freeloop.systems import FourierField, TorusManifold

BUILTINS = ["mechanical", "magnetic", "reeb", "free"]


def fd_monodromy(L, x0, v0, t, dt, h=1e-6):
    z0 = np.concatenate([x0, v0])
    d = x0.size
    P = np.empty((2 * d, 2 * d))
    for j in range(2 * d):
        e = np.zeros(2 * d)
        e[j] = h
        zp, zm = z0 + e, z0 - e
        op = integrate_el(L, zp[:d], zp[d:], t, dt)
        om = integrate_el(L, zm[:d], zm[d:], t, dt)
        P[:, j] = (np.concatenate([op.x[-1], op.v[-1]]) - np.concatenate([om.x[-1], om.v[-1]])) / (2 * h)
    return P


# ---------------------------------------------------------------- monodromy


@pytest.mark.parametrize("name", BUILTINS + ["conformal", "mixed"])
def test_monodromy_matches_finite_differences(all_systems, name):
    L = all_systems[name]
    x0, v0 = np.array([0.13, 0.42]), np.array([0.7, -0.4])
    mono = linearized_flow(L, x0, v0, 1.5, 1e-3)
    ref = fd_monodromy(L, x0, v0, 1.5, 1e-3)
    assert np.max(np.abs(mono.phis[-1] - ref)) / np.max(np.abs(ref)) <= 1e-4


def test_monodromy_from_orbit_sample(mag):
    orb = integrate_el(mag, np.zeros(2), np.array([0.5, 0.2]), 0.7, 1e-3)
    a = linearized_flow(mag, orb)
    b = linearized_flow(mag, np.zeros(2), np.array([0.5, 0.2]), 0.7, 1e-3)
    assert np.array_equal(a.phis, b.phis)
    assert np.allclose(a.x, orb.x, atol=1e-15)


def test_zero_span_is_identity(mag):
    mono = linearized_flow(mag, np.zeros(2), np.ones(2), 0.0, 1e-3)
    assert np.array_equal(mono.phis[-1], np.eye(4))


def test_flat_vertical_block_grows_linearly(free):
    mono = linearized_flow(free, np.zeros(2), np.array([0.6, 0.8]), 5.0, 0.05)
    assert np.max(np.abs(mono.phis[:, :2, 2:] - mono.t[:, None, None] * np.eye(2))) <= 1e-12


def test_state_at_interpolates(mag):
    mono = linearized_flow(mag, np.zeros(2), np.array([0.4, 0.1]), 1.0, 1e-3)
    x, v, P = mono.state_at(mono.t[300])
    assert np.array_equal(P, mono.phis[300])
    t = 0.5374
    x, v, P = mono.state_at(t)
    fine = linearized_flow(mag, np.zeros(2), np.array([0.4, 0.1]), t, t / 5374)
    assert np.allclose(x, fine.x[-1], atol=1e-8)
    assert np.allclose(P, fine.phis[-1], atol=1e-6)


# ---------------------------------------------------------------- conjugate points


def test_flat_geodesics_have_no_conjugate_points(free, rng):
    for _ in range(1000):
        ang = rng.uniform(0, 2 * np.pi)
        v0 = rng.uniform(0.1, 2.0) * np.array([np.cos(ang), np.sin(ang)])
        mono = linearized_flow(free, rng.random(2), v0, 5.0, 0.05)
        assert not conjugate_scan(mono).found


def test_strong_field_orbit_conjugate_within_one_revolution(mag):
    """Slow orbit at the field maximum: a near circle of period 2 pi / 4 pi."""
    v0 = np.array([0.05, 0.0])
    mono = linearized_flow(mag, np.zeros(2), v0, 0.8, 1e-3)
    rep = conjugate_scan(mono)
    assert rep.found
    tc = rep.times[0]
    orb = integrate_el(mag, np.zeros(2), v0, 0.8, 1e-3)
    ang = np.abs(np.unwrap(np.arctan2(orb.v[:, 1], orb.v[:, 0])) - np.arctan2(v0[1], v0[0]))
    revolution = float(np.interp(2 * np.pi, ang, orb.t))
    assert 0.9 * revolution <= tc <= 1.01 * revolution
    # oracle: position derivative w.r.t. initial velocity, by finite differences
    P = fd_monodromy(mag, np.zeros(2), v0, tc, 1e-3)
    sv = np.linalg.svd(P[:2, 2:], compute_uv=False)
    assert sv[-1] <= 1e-6 * rep.scale


def test_reported_times_inside_interval(mag):
    mono = linearized_flow(mag, np.zeros(2), np.array([0.3, 0.0]), 1.2, 1e-3)
    rep = conjugate_scan(mono)
    assert len(rep.points) >= 2
    assert all(0 < p.t <= mono.t[-1] and p.multiplicity >= 1 for p in rep.points)
    assert rep.times == sorted(rep.times)


def test_sign_change_roots_are_tight(mag):
    mono = linearized_flow(mag, np.zeros(2), np.array([0.3, 0.0]), 1.2, 1e-3)
    for p in conjugate_scan(mono).points:
        if p.kind == "sign-change":
            assert mono.det_at(p.t - 1e-6) * mono.det_at(p.t + 1e-6) <= 0


# ---------------------------------------------------------------- second variation


@pytest.fixture(scope="module")
def mech_orbit(mech):
    loop = FreeTimeLoop.straight([0.5, 0.0], (1, 0), 0.5, 64)
    return refine_critical(mech, 2.0, loop)[0]


def test_hessian_vector_products(mech, mech_orbit, rng):
    k = 2.0
    loop = mech_orbit
    H = discrete_hessian(mech, k, loop)
    z0 = pack(loop)
    for _ in range(5):
        w = rng.normal(size=z0.size)
        w /= np.linalg.norm(w)
        h = 1e-5
        gp = packed_gradient(mech, unpack(loop, z0 + h * w), k)
        gm = packed_gradient(mech, unpack(loop, z0 - h * w), k)
        Hw = (gp - gm) / (2 * h)
        assert np.linalg.norm(H @ w - Hw) <= 1e-4 * np.linalg.norm(Hw)
        h = 1e-3
        S = [action(mech, unpack(loop, z0 + s * h * w), k) for s in (-1, 0, 1)]
        curv = (S[2] - 2 * S[1] + S[0]) / h**2
        assert abs(w @ H @ w - curv) <= 1e-4 * max(1.0, abs(curv))


def test_energy_shift_leaves_hessian(mech, mech_orbit):
    H0 = discrete_hessian(mech, 2.0, mech_orbit)
    H1 = discrete_hessian(mech, 2.7, mech_orbit)
    assert np.allclose(H0[:-1, :-1], H1[:-1, :-1], atol=1e-7, rtol=0)
    assert np.allclose(H0, H1, atol=1e-6)


def test_closed_geodesic_minimiser_spectrum(free):
    """Straight loop in class (1,0) at k = 1/2 (T = 1) is a strict minimiser."""
    loop = FreeTimeLoop.straight([0.2, 0.3], (1, 0), 1.0, 64)
    vals, info = hessian_spectrum(free, 0.5, loop, m=6, return_info=True)
    assert np.all(vals >= -1e-8)
    assert info["excluded"] is not None and abs(info["excluded"]) <= 1e-6
    assert info["asymmetry"] <= 1e-4


def test_metric_matrix_spd():
    for mode_loop in (
        FreeTimeLoop.straight([0, 0], (1, 0), 2.0, 16),
        FreeTimeLoop.path([0, 0], [0.3, 0.9], 2.0, 16),
    ):
        for metric in ("weighted", "capped", "unit", "natural"):
            G = metric_matrix(mode_loop, metric)
            assert np.allclose(G, G.T)
            assert np.linalg.eigvalsh(G).min() > 0


# ---------------------------------------------------------------- Jacobi-field bound


def test_flat_jacobi_constant_is_one():
    res = jacobi_bound_check(TorusManifold(2), trials=300)
    assert 0.9 <= res.K <= 1.0 + 1e-9
    assert res.violations == 0


def test_mild_conformal_jacobi_bound():
    u = FourierField.from_terms(2, [(0.05, "cos", (1, 0)), (0.03, "sin", (0, 1))])
    res = jacobi_bound_check(TorusManifold(2, u), trials=1000)
    assert np.isfinite(res.K) and res.K < 10
    assert res.violations == 0


def test_zero_boundary_data_gives_zero_field(conformal):
    x0, v0 = np.array([0.1, 0.6]), np.array([0.5, 0.5])
    mono = linearized_flow(conformal, x0, v0, 1.0, 5e-3)
    P = mono.phis[-1]
    dJ0 = np.linalg.solve(P[:2, 2:], np.zeros(2) - P[:2, :2] @ np.zeros(2))
    assert np.all(mono.phis @ np.concatenate([np.zeros(2), dJ0]) == 0.0)
