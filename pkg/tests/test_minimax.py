import math

import numpy as np
import pytest
from scipy.integrate import quad

from freeloop.loops import FreeTimeLoop, action, resample
from freeloop.minimax import (
    B_MIN,
    GeometryLost,
    MinimaxOptions,
    PathOfLoops,
    constant_start,
    find_negative_action_loop,
    init_path,
    lower_bound_c,
    mountain_pass,
    mountain_pass_threshold,
    relax_minimax,
    slope_estimates,
    struwe_sweep,
)
from freeloop.systems import InvalidInputError


@pytest.fixture(scope="module")
def saddle(mag):
    res = mountain_pass(mag, 0.5)
    assert res.verified
    return res


def circle_oracle(center, r, k, eps=2.0):
    """Continuous action of a circle minimised over T: 2 pi r sqrt(2k) - flux."""

    def a_dot_dx(s):
        x1 = center[0] + r * math.cos(2 * math.pi * s)
        return eps * math.sin(2 * math.pi * x1) * 2 * math.pi * r * math.cos(2 * math.pi * s)

    flux = quad(a_dot_dx, 0.0, 1.0, epsabs=1e-13, limit=200)[0]
    return 2 * math.pi * r * math.sqrt(2 * k) - abs(flux)


# ---------------------------------------------------------------- negative loops


@pytest.mark.parametrize("k", [1.0, 1.2, 2.0, 5.0])
def test_mechanical_has_no_negative_loop(mech, k):
    assert find_negative_action_loop(mech, k) is None


@pytest.mark.parametrize("k", [0.05, 0.2])
def test_reeb_no_negative_loop_above_zero(reeb_sys, k):
    assert find_negative_action_loop(reeb_sys, k) is None


@pytest.mark.parametrize("k", [-0.2, -0.05])
def test_reeb_leaf_loop_below_zero(reeb_sys, k):
    loop = find_negative_action_loop(reeb_sys, k)
    assert loop is not None and loop.winding == (0, 0)
    assert action(reeb_sys, loop, k) < 0
    # it runs along both closed leaves, x1 = 0 and x1 = 1/2
    x1 = loop.nodes[:, 0] % 1.0
    near = np.minimum(np.abs((x1 + 0.5) % 1.0 - 0.5), np.abs(x1 - 0.5))
    assert np.mean(near < 0.05) > 0.8


def test_magnetic_small_circle(mag):
    k = 0.05
    raw = find_negative_action_loop(mag, k, polish_iter=0)
    c = raw.nodes[:-1].mean(axis=0)
    r = np.linalg.norm(raw.nodes - c, axis=1)
    assert np.ptp(r) <= 1e-9 and r[0] <= 0.3
    # centred on a field extremum, x1 = 0 or 1/2; the two are mirror images under
    # a half shift with reversed orientation, so rounding decides the tie
    assert min(abs((c[0] + 0.5) % 1.0 - 0.5), abs(c[0] % 1.0 - 0.5)) < 0.1
    S = action(mag, raw, k)
    ref = circle_oracle(c, r[0], k)
    assert S < 0 and ref < 0
    assert S == pytest.approx(ref, abs=1e-2)
    polished = find_negative_action_loop(mag, k)
    assert polished.winding == (0, 0) and action(mag, polished, k) <= S


def test_circle_oracle_sign_change():
    """Below r = sqrt(2k) / (2 pi) a circle at the field maximum is positive."""
    k = 0.05
    r_star = math.sqrt(2 * k) / (2 * math.pi)
    assert circle_oracle((0.0, 0.0), 0.5 * r_star, k) > 0
    assert circle_oracle((0.0, 0.0), 2.0 * r_star, k) < 0


# ---------------------------------------------------------------- threshold


def test_threshold_formula():
    assert mountain_pass_threshold(1.0, 1.0, 0.5, 0.25) == pytest.approx(0.1875, abs=1e-15)


def test_threshold_without_magnetic_term():
    a, gap, ell0 = 1.3, 0.4, 0.2
    assert mountain_pass_threshold(a, B_MIN, gap, ell0) == pytest.approx(ell0 * math.sqrt(2 * a * gap), rel=1e-10)


def test_threshold_limit_for_exact_free_particle(free):
    d = lower_bound_c(free, 0.5, return_data=True)
    assert d.b == B_MIN
    assert d.c == pytest.approx(d.ell0 * math.sqrt(2 * d.a * (0.5 - d.d1)), rel=1e-10)


def test_threshold_positive_and_below_level(mag):
    k = 0.1
    c = lower_bound_c(mag, k)
    res = mountain_pass(mag, k)
    assert res.verified
    assert 0 < c <= res.level


def test_threshold_needs_energy_above_rest(mech):
    with pytest.raises(InvalidInputError):
        lower_bound_c(mech, 0.5)
    with pytest.raises(InvalidInputError):
        lower_bound_c(mech, 0.5, q0=[0.0, 0.0])
    assert lower_bound_c(mech, 1.5, q0=[0.0, 0.0]) > 0


# ---------------------------------------------------------------- paths


def test_two_image_path_is_endpoints(mag):
    neg = find_negative_action_loop(mag, 0.5)
    const = constant_start(mag, 0.5, neg)
    p = init_path(const, neg, 2)
    assert len(p) == 2
    assert p.images[0] is const and p.images[1] is neg


@pytest.mark.parametrize("M", [3, 9, 33])
def test_path_endpoints_exact(mag, M):
    neg = find_negative_action_loop(mag, 0.5)
    const = constant_start(mag, 0.5, neg)
    for p in (init_path(const, neg, M), init_path(const, neg, M, mag, 0.5)):
        assert np.array_equal(p.images[0].nodes, const.nodes) and p.images[0].T == const.T
        assert np.array_equal(p.images[-1].nodes, neg.nodes) and p.images[-1].T == neg.T
        assert all(im.winding == (0, 0) for im in p.images)


def test_path_max_interior(mag):
    k = 0.5
    neg = find_negative_action_loop(mag, k)
    p = init_path(constant_start(mag, k, neg), neg, 33, mag, k)
    S = p.actions(mag, k)
    assert np.all(np.isfinite(S))
    assert 0 < np.argmax(S) < len(S) - 1


def test_winding_mismatch_rejected():
    a = FreeTimeLoop.constant([0.0, 0.0], 1.0, 16)
    b = FreeTimeLoop.straight([0.0, 0.0], (1, 0), 1.0, 16)
    with pytest.raises(InvalidInputError):
        init_path(a, b, 5)
    with pytest.raises(InvalidInputError):
        PathOfLoops([a, b])


# ---------------------------------------------------------------- relaxation


def test_relaxation_fixed_point(mag, saddle):
    """A path through an already refined saddle returns that saddle."""
    k = 0.5
    images = [resample(im, saddle.loop.N) for im in saddle.path.images]
    imax = int(np.argmax([action(mag, im, k) for im in images]))
    images[imax] = saddle.loop
    res = relax_minimax(mag, k, PathOfLoops(images))
    assert res.iterations <= 1
    assert res.verified
    assert res.level == pytest.approx(saddle.level, abs=1e-9)


def test_relaxation_keeps_endpoints(mag):
    k = 0.5
    neg = find_negative_action_loop(mag, k)
    path = init_path(constant_start(mag, k, neg), neg, 17, mag, k)
    res = relax_minimax(mag, k, path, MinimaxOptions(max_outer=30, hessian=False))
    assert res.path.images[0] is path.images[0]
    assert res.path.images[-1] is path.images[-1]


def test_endpoint_maximum_is_geometry_lost(mech):
    path = PathOfLoops([FreeTimeLoop.constant([0.3, 0.3], T, 16) for T in (1.0, 2.0, 3.0)])
    with pytest.raises(GeometryLost):
        relax_minimax(mech, 2.0, path)


def test_mechanical_mountain_pass_geometry_lost(mech):
    with pytest.raises(GeometryLost):
        mountain_pass(mech, 1.5)


def test_saddle_is_not_a_strict_minimiser(saddle):
    assert saddle.bottom_eigenvalue <= 1e-6


def test_saddle_energy(saddle):
    assert saddle.residuals.energy_error <= 1e-9
    assert saddle.extra["orbit_energy_dev"] <= 1e-5
    assert saddle.closure <= 1e-5


# ---------------------------------------------------------------- sweep


def test_sweep_equal_energies_identical(mag):
    recs = struwe_sweep(mag, (0.5, 0.5), 2)
    assert recs[0].success and recs[1].success
    assert recs[0].level == recs[1].level and recs[0].T == recs[1].T


def test_sweep_rejects_bad_grid(mag):
    with pytest.raises(InvalidInputError):
        struwe_sweep(mag, (0.1, 0.2), 1)
    with pytest.raises(InvalidInputError):
        struwe_sweep(mag, (0.2, 0.1), 3)


def test_slope_estimates_clamped():
    ks = np.array([0.0, 1.0, 2.0, 3.0])
    s = slope_estimates(ks, [0.0, 1e-4, 5e3, np.nan])
    # 1e-4 clamps up, 2500 and ~5e3 clamp down, a missing level falls back to lo
    assert s.tolist() == [0.1, 1e3, 1e3, 0.1]
    mid = slope_estimates(ks, [0.0, 1.0, 2.0, 3.0])
    assert np.allclose(mid, 1.0, rtol=1e-15)
