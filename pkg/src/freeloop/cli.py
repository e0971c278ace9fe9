"""``loopsolve`` command-line driver.

Exit codes: 0 success, 1 usage or configuration error, 2 diagnosed failure
(no mountain-pass geometry, Palais-Smale failure, unverified orbit), 3
numerical breakdown.  Every non-zero exit prints one line
``loopsolve: reason=<code> <detail>`` on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK, EXIT_CONFIG, EXIT_DIAGNOSED, EXIT_NUMERIC = 0, 1, 2, 3
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class Failure(Exception):
    def __init__(self, code, reason, detail=""):
        super().__init__(detail)
        self.code = code
        self.reason = reason
        self.detail = detail


def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (int,)):
        return str(x)
    try:
        return f"{float(x):.17g}"
    except (TypeError, ValueError):
        return str(x)


def _write_kv(path, rows, seed):
    import csv

    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={seed}\n")
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        for key, val in rows:
            w.writerow([key, _fmt(val)])


# ---------------------------------------------------------------- commands


def _minimax_opts(cfg):
    from .minimax import MinimaxOptions

    return MinimaxOptions(
        max_outer=cfg.get_int("max_outer", 400, minimum=1),
        gtol=cfg.get_float("gtol", 1e-4, positive=True),
        refine_N=cfg.get_int("n", 256, minimum=8),
        refine_tol=cfg.get_float("refine_tol", 1e-9, positive=True),
        verify_dt=cfg.get_float("verify_dt", 1e-4, positive=True),
        closure_tol=cfg.get_float("closure_tol", 1e-5, positive=True),
    )


def _class_minimum(L, k, winding, cfg):
    """Descend from a straight loop in the given class, then refine."""
    import numpy as np

    from .flow import CONVERGED, STALLED, DescentOptions, descend, diagnose_ps
    from .loops import FreeTimeLoop
    from .minimax import MinimaxResult, finish_critical, optimal_period

    q0 = cfg.get_vector("start", [0.0] * L.dim, dim=L.dim)
    loop = FreeTimeLoop.straight(np.asarray(q0), winding, 1.0, 64)
    T0 = cfg.get_float("t0", 0.0)
    T = T0 if T0 > 0 else optimal_period(L, loop.nodes, k)[0]
    state = descend(
        L,
        k,
        loop.with_T(T),
        DescentOptions(gtol=cfg.get_float("descent_gtol", 1e-6, positive=True), max_iter=cfg.get_int("max_iter", 5000, minimum=1)),
    )
    if state.verdict not in (CONVERGED, STALLED):
        diag = diagnose_ps(state, L, k)
        return None, state, diag
    res = MinimaxResult(state.action, state.loop, None, False, "unrefined")
    return finish_critical(L, k, state.loop, _minimax_opts(cfg), res), state, None


def cmd_find_orbit(cfg, out, seed):
    import numpy as np

    from .config import build_system
    from .flow import T_BLOWUP, T_COLLAPSE
    from .loops import write_loop
    from .minimax import GeometryLost, find_negative_action_loop, mountain_pass

    L = build_system(cfg)
    k = cfg.get_float("k")
    winding = tuple(int(round(w)) for w in cfg.get_vector("winding", [0] * L.dim, dim=L.dim))
    mode = cfg.get_str("mode", "auto", choices=("auto", "mountain-pass", "class"))
    if mode == "auto":
        mode = "class" if any(winding) else "mountain-pass"
    if mode == "class" and not any(winding):
        raise Failure(EXIT_CONFIG, "config-invalid", "class mode needs a nonzero winding field=run.winding")
    if mode == "class":
        res, state, diag = _class_minimum(L, k, winding, cfg)
        if res is None:
            rows = [("verdict", state.verdict), ("iterations", state.iterations), ("T", state.loop.T), ("action", state.action)]
            if diag.verdict == T_COLLAPSE:
                rows += [("q0_" + str(i + 1), q) for i, q in enumerate(diag.q0)]
                rows += [("dpsi_norm", diag.dpsi_norm), ("energy_gap", diag.energy_gap)]
            elif diag.verdict == T_BLOWUP:
                mu = diag.measure
                rows += [("mean_energy", mu.mean_energy), ("action_per_time", mu.action_per_time)]
            _write_kv(os.path.join(out, "diagnosis.csv"), rows, seed)
            raise Failure(EXIT_DIAGNOSED, "ps-" + diag.verdict.lower(), f"descent ended with {diag.verdict}")
    else:
        base = cfg.get_vector("base", dim=L.dim) if cfg.has("base") else None
        neg = find_negative_action_loop(L, k, base)
        if neg is None:
            raise Failure(EXIT_DIAGNOSED, "no-negative-loop", f"no negative-action loop at k={k:g}")
        try:
            res = mountain_pass(L, k, base, cfg.get_int("images", 33, minimum=3), _minimax_opts(cfg), neg_loop=neg)
        except GeometryLost as exc:
            raise Failure(EXIT_DIAGNOSED, "geometry-lost", str(exc)) from None
    rows = [("k", k), ("mode", mode), ("verified", res.verified), ("reason", res.reason), ("level", res.level)]
    if res.residuals is not None:
        r = res.residuals
        rows += [
            ("el_residual", r.el_residual),
            ("energy_error", r.energy_error),
            ("discrete_pointwise_energy", r.pointwise_energy),
            ("newton_iterations", r.iterations),
        ]
    if res.loop is not None:
        rows += [("T", res.loop.T), ("N", res.loop.N)]
    if res.closure is not None:
        rows.append(("closure", res.closure))
    rows += sorted((key, val) for key, val in res.extra.items())
    if res.bottom_eigenvalue is not None:
        rows.append(("bottom_eigenvalue", res.bottom_eigenvalue))
    _write_kv(os.path.join(out, "verification.csv"), rows, seed)
    if res.loop is not None:
        write_loop(os.path.join(out, "orbit.loop"), res.loop, {"k": _fmt(k), "seed": seed, "level": _fmt(res.level)})
    if res.orbit is not None:
        res.orbit.write_csv(os.path.join(out, "orbit.csv"))
    if not res.verified:
        raise Failure(EXIT_DIAGNOSED, "unverified", res.reason)
    dev = res.extra.get("orbit_energy_dev", float(np.nan))
    print(f"verified orbit k={k:g} T={res.loop.T:.10g} level={res.level:.10g} energy_dev={dev:.3e}")
    return EXIT_OK


def cmd_sweep(cfg, out, seed):
    from .config import build_system
    from .loops import write_loop
    from .minimax import struwe_sweep, write_sweep_csv

    L = build_system(cfg)
    k0, k1 = cfg.get_float("k_min"), cfg.get_float("k_max")
    grid = cfg.get_int("grid", 50, minimum=2)
    if k1 < k0:
        raise Failure(EXIT_CONFIG, "config-invalid", "k_max < k_min field=run.k_max")
    recs = struwe_sweep(L, (k0, k1), grid, _minimax_opts(cfg), M_images=cfg.get_int("images", 17, minimum=3))
    write_sweep_csv(os.path.join(out, "sweep.csv"), recs, seed)
    for i, r in enumerate(recs):
        if r.success:
            write_loop(os.path.join(out, f"sweep_orbit_{i:03d}.loop"), r.loop, {"k": _fmt(r.k), "seed": seed})
    ok = sum(r.success for r in recs)
    print(f"sweep {ok}/{len(recs)} verified")
    return EXIT_OK


def cmd_critvals(cfg, out, seed):
    from .config import build_system
    from .critvals import critical_values, write_report

    L = build_system(cfg)
    cv = critical_values(L, budget=cfg.get_int("budget", 200, minimum=1))
    write_report(os.path.join(out, "critvals.csv"), cv, out, seed)
    cl = cv.clamped
    print(" ".join(f"{q}={cl[q]:.10g}" for q in ("e0", "cu", "c0", "c")))
    return EXIT_OK


def cmd_conjugate(cfg, out, seed, orbit_file):
    import csv

    from .config import build_system
    from .flow import initial_velocity, shoot_closed_orbit
    from .jacobi import conjugate_scan, hessian_spectrum, linearized_flow
    from .loops import CLOSED, read_loop

    if not orbit_file:
        raise Failure(EXIT_CONFIG, "usage", "conjugate needs an orbit file")
    L = build_system(cfg)
    loop = read_loop(orbit_file)
    k = cfg.get_float("k", _header_value(orbit_file, "k"))
    dt = cfg.get_float("verify_dt", 1e-4, positive=True)
    x0, v0, T = loop.nodes[0], initial_velocity(L, loop), loop.T
    if loop.mode == CLOSED:
        x0, v0, T, _ = shoot_closed_orbit(L, k, x0, v0, T, loop.winding, dt=dt)
    span = cfg.get_float("periods", 2.0, positive=True) * T
    rep = conjugate_scan(linearized_flow(L, x0, v0, span, dt))
    oid = os.path.splitext(os.path.basename(orbit_file))[0]
    with open(os.path.join(out, "conjugate.csv"), "w", newline="") as fh:
        fh.write(f"# seed={seed}\n")
        w = csv.writer(fh)
        w.writerow(["orbit_id", "time", "multiplicity", "kind"])
        for p in rep.points:
            w.writerow([oid, _fmt(p.t), p.multiplicity, p.kind])
    vals = hessian_spectrum(L, k, loop, cfg.get_int("eigs", 5, minimum=1))
    with open(os.path.join(out, "spectrum.csv"), "w", newline="") as fh:
        fh.write(f"# seed={seed}\n")
        w = csv.writer(fh)
        w.writerow(["orbit_id", "index", "value"])
        for i, v in enumerate(vals):
            w.writerow([oid, i, _fmt(v)])
    print(f"{len(rep.points)} conjugate times in [0, {span:.6g}]; bottom eigenvalue {vals[0]:.3e}")
    return EXIT_OK


def _header_value(path, key):
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            name, _, val = line[1:].strip().partition("=")
            if name.strip() == key:
                return float(val)
    return None


def cmd_ps_demo(cfg, out, seed):
    import csv

    import numpy as np

    from .flow import T_BLOWUP, DescentOptions, descend, diagnose_ps, write_descent_log
    from .loops import FreeTimeLoop
    from .systems import reeb

    L = reeb()
    D = cfg.get_float("height", 502.0, positive=True)
    T0 = cfg.get_float("t0", 600.0, positive=True)
    N = cfg.get_int("nodes", 4096, minimum=8)
    k = cfg.get_float("k", 0.0)
    poly = FreeTimeLoop.polygon([[0, 0], [0, D], [0.5, D], [0.5, 0], [0, 0]], T0, N)
    opts = DescentOptions(metric="natural", max_iter=cfg.get_int("max_iter", 2000, minimum=1), T_ceiling=cfg.get_float("t_ceiling", 1e3, positive=True))
    state = descend(L, k, poly, opts)
    diag = diagnose_ps(state, L, k)
    write_descent_log(os.path.join(out, "descent_log.csv"), state)
    rows = [("verdict", state.verdict), ("iterations", state.iterations), ("T", state.loop.T), ("action", state.action)]
    if diag.measure is not None:
        mu = diag.measure
        hist = mu.hist
        with open(os.path.join(out, "measure.csv"), "w", newline="") as fh:
            fh.write(f"# seed={seed}\n")
            w = csv.writer(fh)
            d = len(mu.edges)
            w.writerow([f"c{i}" for i in range(d)] + ["mass"])
            centers = [0.5 * (e[:-1] + e[1:]) for e in mu.edges]
            for idx in np.ndindex(hist.shape):
                w.writerow([_fmt(centers[j][i]) for j, i in enumerate(idx)] + [_fmt(hist[idx])])
        rows += [
            ("total_mass", mu.total_mass),
            ("mean_energy", mu.mean_energy),
            ("action_per_time", mu.action_per_time),
            ("mean_velocity_norm", float(np.linalg.norm(mu.mean_velocity))),
            ("tube_mass_leaf0", mu.tube_mass(0, 0.0, 0.05)),
            ("tube_mass_leaf_half", mu.tube_mass(0, 0.5, 0.05)),
        ]
    rows += sorted((f"check_{key}", v) for key, v in diag.checks.items())
    _write_kv(os.path.join(out, "ps_demo.csv"), rows, seed)
    if state.verdict != T_BLOWUP or not all(diag.checks.values()):
        raise Failure(EXIT_DIAGNOSED, "ps-demo-unexpected", f"verdict {state.verdict}, checks {diag.checks}")
    print(f"T-blowup after {state.iterations} iterations, T={state.loop.T:.6g}")
    return EXIT_OK


COMMANDS = {
    "find-orbit": cmd_find_orbit,
    "sweep": cmd_sweep,
    "critvals": cmd_critvals,
    "conjugate": cmd_conjugate,
    "ps-demo": cmd_ps_demo,
}


def build_parser():
    p = argparse.ArgumentParser(prog="loopsolve", description="Periodic orbits of Lagrangian systems on tori.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("orbit_file", nargs="?", help="loop file (conjugate only)")
    p.add_argument("--config", help="INI file with [system] and [run] sections")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory (default: current)")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread cap")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code:
            print("loopsolve: reason=usage bad command line", file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK
    env = os.environ
    threads = args.threads if args.threads is not None else env.get("LOOPSOLVE_THREADS")
    if threads is not None:
        for var in THREAD_VARS:
            env[var] = str(int(threads))
    seed = args.seed if args.seed is not None else int(env.get("LOOPSOLVE_SEED", 0))
    out = args.out or env.get("LOOPSOLVE_OUT") or "."
    try:
        from .config import ConfigError, load_config

        try:
            cfg = load_config(args.config or env.get("LOOPSOLVE_CONFIG"))
        except ConfigError as exc:
            raise Failure(EXIT_CONFIG, exc.reason, str(exc)) from None
        os.makedirs(out, exist_ok=True)
        fn = COMMANDS[args.command]
        try:
            if args.command == "conjugate":
                return fn(cfg, out, seed, args.orbit_file)
            return fn(cfg, out, seed)
        except ConfigError as exc:
            raise Failure(EXIT_CONFIG, exc.reason, str(exc)) from None
    except Failure as f:
        detail = " ".join(str(f.detail).split())
        print(f"loopsolve: reason={f.reason} {detail}".rstrip(), file=sys.stderr)
        return f.code
    except Exception as exc:  # noqa: BLE001 - last-resort classification
        from .systems import InvalidInputError, NumericError

        if isinstance(exc, InvalidInputError):
            code, reason = EXIT_CONFIG, "invalid-input"
        elif isinstance(exc, (NumericError, FloatingPointError, ArithmeticError)) or type(exc).__name__ == "LinAlgError":
            code, reason = EXIT_NUMERIC, "numeric"
        elif isinstance(exc, OSError):
            code, reason = EXIT_CONFIG, "io"
        else:
            raise
        detail = " ".join(str(exc).split())
        print(f"loopsolve: reason={reason} {detail}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
