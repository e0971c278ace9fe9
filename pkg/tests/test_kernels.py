import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from freeloop import _fallback, kernels
from freeloop.loops import _generic_action, discrete_action

NAMES = ["mechanical", "magnetic", "reeb", "free", "conformal", "mixed"]

needs_ext = pytest.mark.skipif(not kernels.USING_COMPILED, reason="compiled kernels not built")


def random_nodes(rng, n=33, scale=0.3):
    steps = scale * rng.normal(size=(n - 1, 2))
    return np.vstack([np.zeros(2), np.cumsum(steps, axis=0)]) + rng.random(2)


@needs_ext
@pytest.mark.parametrize("name", NAMES)
def test_loop_action_backends_agree(all_systems, name, rng):
    tab = all_systems[name].kernel_tables()
    for _ in range(5):
        nodes = random_nodes(rng)
        T, k = rng.uniform(0.2, 5.0), rng.uniform(-1, 3)
        a = kernels._ext.loop_action(*tab.args(), nodes, T, k)
        b = _fallback.loop_action(tab, nodes, T, k)
        for x, y in zip(a, b):
            assert np.allclose(x, y, rtol=1e-12, atol=1e-12)


@needs_ext
@pytest.mark.parametrize("name", NAMES)
def test_rk4_backends_agree(all_systems, name, rng):
    tab = all_systems[name].kernel_tables()
    x0, v0 = rng.random(2), rng.normal(size=2)
    for var in (False, True):
        a = kernels._ext.el_rk4(*tab.args(), x0, v0, 1e-2, 100, var)
        b = _fallback.el_rk4(tab, x0, v0, 1e-2, 100, var)
        assert a[3] == b[3]
        for x, y in zip(a[:3], b[:3]):
            if x is None:
                assert y is None
            else:
                assert np.allclose(x, y, rtol=1e-11, atol=1e-12)


@needs_ext
@given(st.integers(3, 40), st.integers(0, 2**31 - 1))
def test_tridiagonal_backends_agree(n, seed):
    rng = np.random.default_rng(seed)
    sub, sup = rng.normal(size=n), rng.normal(size=n)
    diag = 4.0 + np.abs(sub) + np.abs(sup)
    rhs = rng.normal(size=(n, 2))
    for ext_fn, py_fn in (
        (kernels._ext.tridiag_solve, _fallback.tridiag_solve),
        (kernels._ext.cyclic_tridiag_solve, _fallback.cyclic_tridiag_solve),
    ):
        assert np.allclose(ext_fn(sub, diag, sup, rhs.copy()), py_fn(sub, diag, sup, rhs.copy()), atol=1e-12)


@given(st.integers(3, 40), st.integers(0, 2**31 - 1))
def test_cyclic_solve_against_dense(n, seed):
    rng = np.random.default_rng(seed)
    sub, sup = rng.normal(size=n), rng.normal(size=n)
    diag = 4.0 + np.abs(sub) + np.abs(sup)
    A = np.diag(diag)
    for i in range(n):
        A[i, (i - 1) % n] += sub[i]
        A[i, (i + 1) % n] += sup[i]
    rhs = rng.normal(size=n)
    assert np.allclose(kernels.cyclic_tridiag_solve(sub, diag, sup, rhs), np.linalg.solve(A, rhs), atol=1e-12)


@pytest.mark.parametrize("name", NAMES)
def test_table_path_matches_generic_path(all_systems, name, rng):
    """The tabulated kernel and the per-point evaluate() route give the same action."""
    L = all_systems[name]
    nodes = random_nodes(rng)
    a = discrete_action(L, nodes, 1.7, 0.4)
    b = _generic_action(L, nodes, 1.7, 0.4)
    for x, y in zip(a, b):
        assert np.allclose(x, y, rtol=1e-11, atol=1e-12)


def test_pure_python_switch():
    env = dict(os.environ, LOOPSOLVE_PURE_PYTHON="1")
    out = subprocess.run(
        [sys.executable, "-c", "from freeloop import kernels; print(kernels.USING_COMPILED)"],
        env=env,
        capture_output=True,
        text=True,
        check=True,
    )
    assert out.stdout.strip() == "False"
