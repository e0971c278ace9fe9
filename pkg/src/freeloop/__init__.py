"""Periodic orbits of Tonelli Lagrangians on tori via the free-period action.

Submodules load on first attribute access so that the command-line driver
can cap BLAS threads before numpy is imported.
"""

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    "systems": ("FourierField", "TorusManifold", "FourierLagrangian", "TonelliLagrangian", "free_particle", "mechanical", "magnetic", "reeb"),
    "loops": ("FreeTimeLoop", "LoopTangent", "LoopCotangent", "action", "d_action", "h1_gradient", "metric_dual"),
    "flow": ("DescentOptions", "descend", "refine_critical", "integrate_el", "diagnose_ps"),
    "minimax": ("find_negative_action_loop", "lower_bound_c", "mountain_pass", "relax_minimax", "struwe_sweep", "init_path"),
    "critvals": ("e0_exact", "mane_c_lower", "cu_lower", "c0_estimate", "peierls_phi", "peierls_scan", "critical_values"),
    "jacobi": ("linearized_flow", "conjugate_scan", "hessian_spectrum", "jacobi_bound_check"),
    "kernels": ("USING_COMPILED",),
}
_WHERE = {name: mod for mod, names in _EXPORTS.items() for name in names}
_SUBMODULES = set(_EXPORTS) | {"config", "cli"}

__all__ = sorted(_WHERE) + sorted(_SUBMODULES)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    if name in _WHERE:
        return getattr(importlib.import_module(f".{_WHERE[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
