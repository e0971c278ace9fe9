"""Acceptance criteria 1 to 9.

Every test carries ``@pytest.mark.criterion(n)``; the terminal summary
prints one PASS/FAIL line per criterion (see ``conftest.py``).
"""

import csv
import time

import numpy as np
import pytest

from freeloop.cli import EXIT_OK, main
from freeloop.critvals import e0_exact, excursion_guess, peierls_scan
from freeloop.flow import guard_counts, guard_violations, integrate_el
from freeloop.jacobi import conjugate_scan, hessian_spectrum, linearized_flow
from freeloop.loops import FreeTimeLoop, LoopTangent, action, admissible, d_action, h1_gradient, metric_inner, read_loop
from freeloop.minimax import find_negative_action_loop, lower_bound_c, struwe_sweep

BUILTINS = ["mechanical", "magnetic", "reeb", "free"]


def read_kv(path):
    with open(path) as fh:
        return {r["key"]: r["value"] for r in csv.DictReader(ln for ln in fh if not ln.startswith("#"))}


# ---------------------------------------------------------------- criterion 1

ORBIT_CASES = {
    "mechanical-k2-class10": ("mechanical", "k = 2\nwinding = 1 0\n"),
    "mechanical-k3-class01": ("mechanical", "k = 3\nwinding = 0 1\n"),
    "magnetic-k0.2-mountain-pass": ("magnetic", "k = 0.2\n"),
    "magnetic-k1-mountain-pass": ("magnetic", "k = 1.0\n"),
    "magnetic-k3-class01": ("magnetic", "k = 3\nwinding = 0 1\n"),
    "reeb-k0.5-class01": ("reeb", "k = 0.5\nwinding = 0 1\n"),
    "free-k0.5-class11": ("free", "k = 0.5\nwinding = 1 1\n"),
}


@pytest.mark.criterion(1)
@pytest.mark.parametrize("case", sorted(ORBIT_CASES))
def test_c1_orbit_validity(case, builtins, tmp_path):
    kind, run = ORBIT_CASES[case]
    cfg = tmp_path / "run.ini"
    cfg.write_text(f"[system]\nkind = {kind}\n\n[run]\n{run}n = 256\n")
    t0 = time.perf_counter()
    code = main(["find-orbit", "--config", str(cfg), "--out", str(tmp_path)])
    elapsed = time.perf_counter() - t0
    assert code == EXIT_OK
    assert elapsed <= 60.0
    kv = read_kv(tmp_path / "verification.csv")
    k = float(kv["k"])
    assert int(kv["N"]) == 256
    assert float(kv["el_residual"]) <= 1e-9
    assert float(kv["energy_error"]) <= 1e-9
    assert float(kv["orbit_energy_dev"]) <= 1e-5
    assert float(kv["closure"]) <= 1e-5
    # independent re-integration from the emitted orbit samples
    data = np.loadtxt(tmp_path / "orbit.csv", delimiter=",", skiprows=1)
    assert np.max(np.abs(data[:, -1] - k)) <= 1e-5
    loop = read_loop(tmp_path / "orbit.loop")
    x0, v0 = data[0, 1:3], data[0, 3:5]
    T = float(kv["shooting_period"])
    orb = integrate_el(builtins[kind], x0, v0, T, 1e-4)
    gap = np.linalg.norm(orb.x[-1] - x0 - np.array(loop.winding)) + np.linalg.norm(orb.v[-1] - v0)
    assert gap <= 1e-5


# ---------------------------------------------------------------- criterion 2


def _random_loop(rng, N=48):
    s = np.arange(N + 1)[:, None] / N
    nodes = rng.random(2) + s * rng.integers(-1, 2, size=2)
    for m in (1, 2, 3):
        a, b = 0.15 * rng.normal(size=(2, 2)) / m
        nodes = nodes + a * np.cos(2 * np.pi * m * s) + b * np.sin(2 * np.pi * m * s) - a
    return FreeTimeLoop(nodes, float(np.exp(rng.uniform(np.log(0.2), np.log(5.0)))))


@pytest.mark.criterion(2)
@pytest.mark.parametrize("name", BUILTINS)
def test_c2_gradient_correctness(builtins, name):
    L = builtins[name]
    rng = np.random.default_rng(2024)
    worst_dual = worst_fd = 0.0
    for _ in range(20):
        loop = _random_loop(rng)
        k = float(rng.uniform(-1, 2))
        tan = LoopTangent(admissible(loop, rng.normal(size=loop.nodes.shape)), float(rng.normal()))
        exact = d_action(L, loop, k).pair(tan)
        grad = h1_gradient(L, loop, k)
        worst_dual = max(worst_dual, abs(metric_inner(loop, grad, tan) - exact) / max(1.0, abs(exact)))
        h = 1e-6
        plus = loop.with_nodes(loop.nodes + h * tan.xi, loop.T + h * tan.alpha)
        minus = loop.with_nodes(loop.nodes - h * tan.xi, loop.T - h * tan.alpha)
        fd = (action(L, plus, k) - action(L, minus, k)) / (2 * h)
        worst_fd = max(worst_fd, abs(exact - fd) / max(1.0, abs(fd)))
    assert worst_dual <= 1e-5
    assert worst_fd <= 1e-5


# ---------------------------------------------------------------- criterion 3


@pytest.mark.criterion(3)
def test_c3_mechanical_e0(mech):
    assert e0_exact(mech) == 1.0


@pytest.mark.criterion(3)
def test_c3_mechanical_c(critvals_by_system):
    assert abs(critvals_by_system["mechanical"].c_lower - 1.0) <= 1e-2


@pytest.mark.criterion(3)
def test_c3_no_negative_loop_above_e0(mech):
    found = [k for k in np.linspace(1.0, 5.0, 20) if find_negative_action_loop(mech, float(k)) is not None]
    assert found == []


# ---------------------------------------------------------------- criterion 4


@pytest.mark.criterion(4)
def test_c4_reeb_c(critvals_by_system):
    assert abs(critvals_by_system["reeb"].c_lower) <= 1e-2


@pytest.mark.criterion(4)
def test_c4_ps_demo(tmp_path):
    assert main(["ps-demo", "--out", str(tmp_path)]) == EXIT_OK
    kv = read_kv(tmp_path / "ps_demo.csv")
    assert kv["verdict"] == "TBlowup"
    assert abs(float(kv["action_per_time"])) <= 1e-2
    assert float(kv["mean_velocity_norm"]) <= 0.05
    assert abs(float(kv["tube_mass_leaf0"]) - 0.5) <= 0.1
    assert abs(float(kv["tube_mass_leaf_half"]) - 0.5) <= 0.1


@pytest.mark.criterion(4)
def test_c4_reeb_barrier_bounded(reeb_sys):
    q = np.zeros(2)
    Ts = np.linspace(20.0, 200.0, 10)
    phi = peierls_scan(reeb_sys, 0.0, q, q, Ts, starts_fn=lambda T: [excursion_guess(q, T)])
    assert np.all(np.isfinite(phi)) and phi.min() > 0
    assert phi.max() / phi.min() <= 3.0


# ---------------------------------------------------------------- criterion 5


@pytest.mark.criterion(5)
def test_c5_mountain_pass_threshold(mag, magnetic_orbits, critvals_by_system):
    e0 = critvals_by_system["magnetic"].e0
    cu = critvals_by_system["magnetic"].cu_lower
    ok = 0
    for k, res in magnetic_orbits:
        assert e0 < k < cu
        if not res.verified:
            continue
        ok += 1
        bound = lower_bound_c(mag, k)
        assert 0 < bound <= res.level, (k, bound, res.level)
    assert ok == len(magnetic_orbits)


# ---------------------------------------------------------------- criterion 6


@pytest.fixture(scope="module")
def sweep(mag):
    return struwe_sweep(mag, (0.04, 1.96), 50)


@pytest.mark.criterion(6)
def test_c6_sweep_success_rate(sweep):
    assert sum(r.success for r in sweep) >= 0.9 * len(sweep)


@pytest.mark.criterion(6)
def test_c6_levels_monotone(sweep):
    levels = [r.level for r in sweep if r.success]
    assert all(b >= a for a, b in zip(levels, levels[1:]))


@pytest.mark.criterion(6)
def test_c6_period_bound(sweep):
    assert all(r.T <= r.slope + 2.0 for r in sweep if r.success)


# ---------------------------------------------------------------- criterion 7


@pytest.mark.criterion(7)
def test_c7_mountain_pass_orbits_have_conjugate_points(mag, magnetic_orbits, magnetic_cu):
    for k, res in magnetic_orbits:
        assert res.verified and k < magnetic_cu
        o = res.orbit
        # two periods: conjugate pairs may straddle the seam of the loop
        mono = linearized_flow(mag, o.x[0], o.v[0], 2 * o.t[-1], 1e-4)
        assert conjugate_scan(mono).found, k


@pytest.mark.criterion(7)
def test_c7_flat_geodesics_have_none(free):
    rng = np.random.default_rng(7)
    for _ in range(1000):
        w = rng.integers(-3, 4, size=2)
        if not w.any():
            w[0] = 1
        mono = linearized_flow(free, rng.random(2), w * rng.uniform(0.2, 2.0), 3.0, 0.02)
        assert not conjugate_scan(mono).found


@pytest.mark.criterion(7)
def test_c7_saddles_not_strict_minima(magnetic_orbits):
    assert all(res.bottom_eigenvalue <= 1e-6 for _, res in magnetic_orbits)


@pytest.mark.criterion(7)
@pytest.mark.parametrize("winding", [(1, 0), (0, 1), (1, 1), (2, -1)])
def test_c7_geodesic_minimisers_nonnegative(free, winding):
    length = float(np.hypot(*winding))
    # at k = 1/2 the free-time optimal period equals the length
    loop = FreeTimeLoop.straight([0.3, 0.1], winding, length, 64)
    vals = hessian_spectrum(free, 0.5, loop, m=8)
    assert np.all(vals >= -1e-8)


@pytest.mark.criterion(7)
def test_c7_mechanical_class_minimiser_nonnegative(mech, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[system]\nkind = mechanical\n\n[run]\nk = 2\nwinding = 1 0\n")
    assert main(["find-orbit", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    loop = read_loop(tmp_path / "orbit.loop")
    assert np.all(hessian_spectrum(mech, 2.0, loop, m=8) >= -1e-8)


# ---------------------------------------------------------------- criterion 9


@pytest.mark.criterion(9)
@pytest.mark.parametrize("name", BUILTINS)
def test_c9_ordering(critvals_by_system, name):
    c = critvals_by_system[name].clamped
    assert c["e0"] <= c["cu"] <= c["c0"] <= c["c"]


# ---------------------------------------------------------------- criterion 8


@pytest.mark.criterion(8)
@pytest.mark.guard_audit
def test_c8_relative_completeness_guard():
    counts = guard_counts()
    print(f"guard audit: {counts['descents']} descents, {counts['collapses']} collapses")
    assert counts["descents"] > 0
    assert guard_violations() == []
