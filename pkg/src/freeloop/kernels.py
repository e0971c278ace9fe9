"""Kernel dispatch: compiled extension when importable, numpy otherwise.

All entry points take a :class:`~freeloop.systems.KernelTables` first so the
callers never see which backend is active.  Set ``LOOPSOLVE_PURE_PYTHON=1``
to force the fallback.
"""

import os

import numpy as np

from . import _fallback

USING_COMPILED = False
_ext = None
if os.environ.get("LOOPSOLVE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _ext

        USING_COMPILED = True
    except ImportError:  # extension not built
        _ext = None


def _compiled_ok(tab):
    return _ext is not None and tab.dim <= _ext.MAX_DIM


def loop_action(tab, nodes, T, k):
    """Discrete action ``(S, dS/dnodes, dS/dT, E_seg, L_seg)``."""
    nodes = np.ascontiguousarray(nodes, dtype=float)
    if _compiled_ok(tab):
        return _ext.loop_action(*tab.args(), nodes, float(T), float(k))
    return _fallback.loop_action(tab, nodes, T, k)


def tridiag_solve(sub, diag, sup, rhs):
    args = [np.ascontiguousarray(a, dtype=float) for a in (sub, diag, sup)]
    if _ext is not None:
        return _ext.tridiag_solve(*args, rhs)
    return _fallback.tridiag_solve(*args, np.asarray(rhs, float))


def cyclic_tridiag_solve(sub, diag, sup, rhs):
    args = [np.ascontiguousarray(a, dtype=float) for a in (sub, diag, sup)]
    if _ext is not None:
        return _ext.cyclic_tridiag_solve(*args, rhs)
    return _fallback.cyclic_tridiag_solve(*args, np.asarray(rhs, float))


def el_rk4(tab, x0, v0, dt, nsteps, variational=False):
    """RK4 on the EL system; returns ``(xs, vs, phis, count)``."""
    x0 = np.asarray(x0, float)
    v0 = np.asarray(v0, float)
    if _compiled_ok(tab):
        return _ext.el_rk4(*tab.args(), x0, v0, float(dt), int(nsteps), bool(variational))
    return _fallback.el_rk4(tab, x0, v0, dt, nsteps, variational)
