"""Command line driver: ``tubeox {mesh,flow,oxidize,post,reproduce}``.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 I/O error.
Errors are reported on stderr as one JSON object. ``TUBEOX_OUT`` overrides
the output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

log = logging.getLogger("tubeox")

OUT_ENV = "TUBEOX_OUT"

# declared sweep values (see README)
PE_SWEEP = (1.0, 10.0, 100.0)
SH1_SWEEP = (1e-4, 1e-3, 1e-2)
SH2_VALUES = {"fig21": 1e-5, "fig22": 1e-6, "fig23": 1e-7, "fig24": 1e-5, "fig25": 1e-6, "fig26": 1e-7}
ARRANGEMENTS = ("inline", "staggered")


# ----------------------------------------------------------------------------
# building blocks

class Runner:
    """Shared state of one invocation: config, output directory, caches."""

    def __init__(self, cfg, out: Path):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self._meshes = {}

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def mesh(self, cfg=None):
        from .io import read_text
        from .mesh import enrich_p2, parse_msh
        from .meshgen import generate
        cfg = cfg or self.cfg
        key = (cfg.mesh_path, cfg.arrangement, cfg.grid, tuple(sorted(cfg.geometry_overrides.items())), cfg.seed)
        if key not in self._meshes:
            t0 = time.perf_counter()
            if cfg.mesh_path:
                m = parse_msh(read_text(cfg.mesh_path))
            else:
                m = generate(cfg.geometry, seed=cfg.seed)
            log.info("mesh: %d vertices, %d triangles (%.1f s)", m.n_vertices, m.n_triangles,
                     time.perf_counter() - t0)
            self._meshes[key] = enrich_p2(m)
        return self._meshes[key]

    def flow(self, cfg=None, re=None, use_cache=True):
        """Converged flow for ``re``; cached on disk keyed by the mesh fingerprint."""
        import numpy as np
        from .flow import FlowField, continuation_solve, mass_imbalance
        cfg = cfg or self.cfg
        re = float(cfg.re if re is None else re)
        p2 = self.mesh(cfg)
        fp = fingerprint(p2.base)
        cache = self.path("cache", f"flow_{fp[:16]}_re{re:g}.npz")
        if use_cache and cache.exists():
            data = np.load(cache)
            if str(data["fingerprint"]) == fp:
                log.info("flow: loaded %s", cache)
                return FlowField(p2, data["u"], data["p"], re), None
        t0 = time.perf_counter()
        flow, reports = continuation_solve(p2, re, rtol=cfg.newton_rtol, atol=cfg.newton_atol,
                                           max_iter=cfg.newton_max_iter)
        log.info("flow: Re = %g converged in %.1f s, mass imbalance %.2e", re, time.perf_counter() - t0,
                 mass_imbalance(flow))
        np.savez(cache, u=flow.u, p=flow.p, fingerprint=np.array(fp))
        return flow, reports

    def transient(self, cfg=None, flow=None, T=None, tau=None, snapshot_times=None, observers=True):
        from .oxidation import TransportOperators, run_transient
        from .postproc import outlet_average, oxide_mass
        cfg = cfg or self.cfg
        flow = flow or self.flow(cfg)[0]
        k = cfg.kinetics
        ops = TransportOperators(flow, k)
        obs = {}
        if observers:
            obs["c_out"] = lambda o, s: outlet_average(s.c, o.base)
            tubes = [i for i in cfg.mass_tubes if i in o_tubes(ops)]
            obs["mass"] = lambda o, s: [oxide_mass(s, o, i) for i in tubes]
            obs["c_range"] = lambda o, s: (float(s.c.min()), float(s.c.max()))
        T = cfg.t_end if T is None else T
        tau = cfg.tau if tau is None else tau
        snaps = tuple(t for t in (cfg.snapshot_times if snapshot_times is None else snapshot_times) if t <= T)
        t0 = time.perf_counter()
        res = run_transient(flow, k, tau, T, observers=obs, snapshot_times=snaps + (T,),
                            startup=cfg.startup_steps, ops=ops)
        log.info("transient: %d steps in %.1f s", len(res.reports), time.perf_counter() - t0)
        return ops, res


def o_tubes(ops):
    return sorted(ops.base.tubes)


def fingerprint(mesh) -> str:
    h = hashlib.sha256()
    for arr in (mesh.vertices, mesh.triangles, mesh.boundary_edges, mesh.boundary_codes):
        h.update(arr.tobytes())
    return h.hexdigest()


# ----------------------------------------------------------------------------
# artifact writers

def write_newton(path, rows):
    from .io import write_csv
    return write_csv(path, ["configuration", "re", "iteration", "absolute_residual", "relative_residual"], rows)


def write_flow_outputs(run: Runner, flow, prefix: str):
    from .io import write_csv, write_vtk
    from .postproc import midline_profile, streamfunction
    import numpy as np
    p2 = flow.mesh
    nv = p2.base.n_vertices
    psi = streamfunction(flow)
    write_vtk(run.path(f"{prefix}.vtk"), p2, point_data={
        "u": np.column_stack([flow.u1[:nv], flow.u2[:nv]]), "p": flow.p, "psi": psi})
    profiles = [midline_profile(f, p2, name=n) for f, n in ((flow.u1, "u1"), (flow.u2, "u2"), (flow.p, "p"))]
    write_csv(run.path(f"{prefix}_midline.csv"), ["x1", "u1", "u2", "p"],
              [(x, *(None if np.isnan(pr.values[i]) else pr.values[i] for pr in profiles))
               for i, x in enumerate(profiles[0].x)])
    return psi, profiles


def write_series(run: Runner, res, prefix: str, tubes):
    from .io import write_csv
    write_csv(run.path(f"{prefix}_c_out.csv"), ["t", "c_out"], zip(res.times, res.observations["c_out"]))
    write_csv(run.path(f"{prefix}_mass.csv"), ["t"] + [f"m{i}" for i in tubes],
              [(t, *m) for t, m in zip(res.times, res.observations["mass"])])
    write_csv(run.path(f"{prefix}_steps.csv"), ["step", "t", "iterations", "final_residual"],
              [(r.step, r.t, r.iterations, r.residuals[-1]) for r in res.reports])


def write_film(run: Runner, ops, state, tube: int, name: str):
    from .io import write_csv
    from .postproc import film_profile
    fp = film_profile(state, ops, tube)
    return write_csv(run.path(name), ["theta", "d"], zip(fp.theta, fp.d))


def write_snapshot(run: Runner, ops, state, name: str):
    from .io import write_vtk
    return write_vtk(run.path(name), ops.base, point_data={"c": state.c})


# ----------------------------------------------------------------------------
# subcommands

def cmd_mesh(run: Runner, args):
    from .io import write_jsonl, write_msh
    from .mesh import validate
    p2 = run.mesh()
    rep = validate(p2.base, n_tubes=len(p2.base.tubes))
    write_msh(p2.base, run.path("mesh.msh"))
    write_jsonl(run.path("mesh_quality.jsonl"), [dict(rep.as_dict(), arrangement=run.cfg.arrangement,
                                                      grid=run.cfg.grid)])
    if not rep.ok:
        from .errors import TopologyError
        raise TopologyError("; ".join(rep.failures))
    return {"vertices": p2.base.n_vertices, "triangles": p2.base.n_triangles}


def cmd_flow(run: Runner, args):
    from .flow import mass_imbalance
    flow, reports = run.flow(use_cache=False)
    rows = []
    for rep in reports or []:
        rows += [(run.cfg.arrangement, rep.re, i, a, r) for i, a, r in rep.rows()]
    write_newton(run.path("newton.csv"), rows)
    write_flow_outputs(run, flow, "flow")
    return {"re": flow.re, "mass_imbalance": mass_imbalance(flow)}


def cmd_oxidize(run: Runner, args):
    import numpy as np
    cfg = run.cfg
    ops, res = run.transient()
    tubes = [i for i in cfg.mass_tubes if i in o_tubes(ops)]
    write_series(run, res, "oxidize", tubes)
    for t, state in sorted(res.snapshots.items()):
        write_snapshot(run, ops, state, f"snapshots/c_t{t:g}.vtk")
        for tube in cfg.film_tubes:
            write_film(run, ops, state, tube, f"film/tube{tube}_t{t:g}.csv")
    final = res.final
    np.savez(run.path("state_final.npz"), c=final.c, d=final.d, t=final.t, wall_nodes=ops.wall_nodes)
    cmin = min(r[0] for r in res.observations["c_range"])
    cmax = max(r[1] for r in res.observations["c_range"])
    its = res.iteration_counts()
    return {"steps": len(res.reports), "c_min": cmin, "c_max": cmax,
            "c_out": res.observations["c_out"][-1],
            "max_newton_iterations": int(its.max()) if len(its) else 0}


def cmd_post(run: Runner, args):
    import numpy as np
    from .oxidation import OxidationState, TransportOperators
    from .postproc import gap_vortex_strength, interior_extrema, outlet_average
    cfg = run.cfg
    flow, _ = run.flow()
    psi, _ = write_flow_outputs(run, flow, "post_flow")
    mn, mx = interior_extrema(psi, flow.mesh)
    summary = {"psi_interior_minima": int(len(mn)), "psi_interior_maxima": int(len(mx))}
    g = cfg.geometry
    xc = g.tube_centers()[:, 0]
    summary["gap_vortex_strength"] = [gap_vortex_strength(psi, flow.mesh, xc[i], xc[i + 1]) for i in range(len(xc) - 1)
                                      if cfg.arrangement == "inline"]
    state_path = run.out / "state_final.npz"
    if state_path.exists():
        data = np.load(state_path)
        ops = TransportOperators(flow, cfg.kinetics)
        if not np.array_equal(data["wall_nodes"], ops.wall_nodes):
            from .errors import AlignmentError
            raise AlignmentError("stored state does not match the mesh")
        state = OxidationState(data["c"], data["d"], float(data["t"]))
        for tube in cfg.film_tubes:
            write_film(run, ops, state, tube, f"post_film/tube{tube}_t{state.t:g}.csv")
        summary["c_out"] = outlet_average(state.c, ops.base)
    return summary


# ----------------------------------------------------------------------------
# reproduce presets

def _both(run, fn):
    out = {}
    for arr in ARRANGEMENTS:
        out[arr] = fn(run.cfg.with_(arrangement=arr), arr)
    return out


def rep_table1(run: Runner):
    from .flow import FlowProblem, newton_solve, solve_stokes
    from .errors import NonConvergenceError
    rows, summary = [], {}
    for arr in ARRANGEMENTS:
        cfg = run.cfg.with_(arrangement=arr)
        p2 = run.mesh(cfg)
        for re in (10.0, 50.0, 150.0):
            prob = FlowProblem(p2, re)
            try:
                _, rep = newton_solve(p2, re, solve_stokes(p2, re, prob), problem=prob,
                                      rtol=cfg.newton_rtol, atol=cfg.newton_atol, max_iter=cfg.newton_max_iter)
            except NonConvergenceError as exc:
                rep = exc.report
            rows += [(arr, re, i, a, r) for i, a, r in rep.rows()]
            summary[f"{arr}_re{re:g}"] = rep.iterations
    write_newton(run.path("table1.csv"), rows)
    return summary


def rep_grid(run: Runner, arr: str):
    import numpy as np
    from .io import write_csv
    from .postproc import deviation_curves, midline_profile
    profiles = {}
    for grid in ("fine", "basic", "coarse"):
        cfg = run.cfg.with_(arrangement=arr, grid=grid, re=10.0)
        flow, _ = run.flow(cfg)
        profiles[grid] = [midline_profile(f, flow.mesh, name=n) for f, n in
                          ((flow.u1, "u1"), (flow.u2, "u2"), (flow.p, "p"))]
        run._meshes.clear()
    summary = {}
    rows = []
    fine = profiles["fine"]
    devs = {g: deviation_curves(fine[0], [profiles[g][0]]) + deviation_curves(fine[1], [profiles[g][1]])
            + deviation_curves(fine[2], [profiles[g][2]]) for g in ("basic", "coarse")}
    for i, x in enumerate(fine[0].x):
        row = [x] + [fine[j].values[i] for j in range(3)]
        for g in ("basic", "coarse"):
            row += [devs[g][j].delta[i] for j in range(3)]
        rows.append([None if isinstance(v, float) and np.isnan(v) else v for v in row])
    write_csv(run.path(f"grid_{arr}.csv"),
              ["x1", "u1_fine", "u2_fine", "p_fine", "du1_basic", "du2_basic", "dp_basic",
               "du1_coarse", "du2_coarse", "dp_coarse"], rows)
    for g in ("basic", "coarse"):
        summary[g] = {n: devs[g][j].max_abs for j, n in enumerate(("u1", "u2", "p"))}
    return summary


def rep_re_sweep(run: Runner, arr: str, streamlines: bool):
    from .postproc import gap_vortex_strength, interior_extrema
    summary = {}
    for re in (10.0, 50.0, 150.0):
        cfg = run.cfg.with_(arrangement=arr, re=re)
        flow, _ = run.flow(cfg)
        psi, _ = write_flow_outputs(run, flow, f"{arr}_re{re:g}")
        if streamlines:
            mn, mx = interior_extrema(psi, flow.mesh)
            entry = {"interior_extrema": int(len(mn) + len(mx))}
            if arr == "inline":
                xc = cfg.geometry.tube_centers()[:, 0]
                entry["max_gap_vortex"] = max(gap_vortex_strength(psi, flow.mesh, xc[i], xc[i + 1])
                                              for i in range(len(xc) - 1))
            summary[f"re{re:g}"] = entry
    return summary


def rep_snapshots(run: Runner, arr: str):
    cfg = run.cfg.with_(arrangement=arr)
    ops, res = run.transient(cfg, T=max(cfg.snapshot_times))
    for t, state in sorted(res.snapshots.items()):
        write_snapshot(run, ops, state, f"{arr}_c_t{t:g}.vtk")
    return {"snapshots": sorted(res.snapshots)}


def rep_time_steps(run: Runner, arr: str):
    import numpy as np
    from .io import write_csv
    from .postproc import deviation_curves, midline_profile
    cfg = run.cfg.with_(arrangement=arr)
    T = max(cfg.snapshot_times)
    runs = {tau: run.transient(cfg, tau=tau, T=T, observers=False) for tau in (0.05, 0.1, 0.2)}
    summary = {}
    ops = runs[0.05][0]
    for t in cfg.snapshot_times:
        prof = {tau: midline_profile(r.snapshots[t].c, ops.base, name=f"tau={tau}") for tau, (_, r) in runs.items()}
        d1, d2 = deviation_curves(prof[0.05], [prof[0.1], prof[0.2]])
        write_csv(run.path(f"{arr}_tau_t{t:g}.csv"), ["x1", "c_ref", "dc_tau0.1", "dc_tau0.2"],
                  [(x, *(None if np.isnan(v) else v for v in (prof[0.05].values[i], d1.delta[i], d2.delta[i])))
                   for i, x in enumerate(prof[0.05].x)])
        summary[f"t{t:g}"] = {"tau0.1": d1.max_abs, "tau0.2": d2.max_abs}
    return summary


def rep_sweep(run: Runner, arr: str, key: str, values):
    from .io import write_csv
    cfg0 = run.cfg.with_(arrangement=arr)
    series = {}
    flow, _ = run.flow(cfg0)
    for v in values:
        _, res = run.transient(cfg0.with_(**{key: v}), flow=flow)
        series[v] = res
    times = series[values[0]].times
    write_csv(run.path(f"{arr}_{key}_sweep.csv"), ["t"] + [f"c_out_{key}={v:g}" for v in values],
              [(t, *(series[v].observations["c_out"][i] for v in values)) for i, t in enumerate(times)])
    return {f"{key}={v:g}": series[v].observations["c_out"][-1] for v in values}


def rep_film(run: Runner, arr: str, sh2: float | None, mass: bool):
    cfg = run.cfg.with_(arrangement=arr, sh2_inv=0.0 if sh2 is None else 1.0 / sh2)
    ops, res = run.transient(cfg)
    tag = "linear" if sh2 is None else f"sh2_{sh2:g}"
    summary = {}
    for t, state in sorted(res.snapshots.items()):
        for tube in cfg.film_tubes:
            write_film(run, ops, state, tube, f"{arr}_{tag}_film_tube{tube}_t{t:g}.csv")
    if mass:
        tubes = [i for i in cfg.mass_tubes if i in o_tubes(ops)]
        write_series(run, res, f"{arr}_{tag}", tubes)
        summary["mass_final"] = res.observations["mass"][-1]
    its = res.iteration_counts()
    summary["steps_le3_fraction"] = float((its <= 3).mean()) if len(its) else 1.0
    return summary


FIGURES = {
    "table1": lambda run: rep_table1(run),
    "fig7": lambda run: rep_grid(run, "inline"),
    "fig8": lambda run: rep_grid(run, "staggered"),
    "fig9": lambda run: rep_re_sweep(run, "inline", False),
    "fig10": lambda run: rep_re_sweep(run, "staggered", False),
    "fig11": lambda run: rep_re_sweep(run, "inline", True),
    "fig12": lambda run: rep_re_sweep(run, "staggered", True),
    "fig13": lambda run: rep_snapshots(run, "inline"),
    "fig14": lambda run: rep_snapshots(run, "staggered"),
    "fig15": lambda run: rep_time_steps(run, "inline"),
    "fig16": lambda run: rep_time_steps(run, "staggered"),
    "fig17": lambda run: _both(run, lambda c, a: rep_sweep(run, a, "pe", PE_SWEEP)),
    "fig18": lambda run: _both(run, lambda c, a: rep_sweep(run, a, "sh1", SH1_SWEEP)),
    "fig20": lambda run: _both(run, lambda c, a: rep_film(run, a, None, False)),
}
for _fig, _sh2 in SH2_VALUES.items():
    FIGURES[_fig] = (lambda s, m: lambda run: _both(run, lambda c, a: rep_film(run, a, s, m)))(
        _sh2, int(_fig[3:]) >= 24)


def cmd_reproduce(run: Runner, args):
    figure = args.figure
    if figure not in FIGURES:
        from .errors import ConfigError
        raise ConfigError(f"unknown figure {figure!r}; choose from {sorted(FIGURES, key=_fig_order)}")
    return FIGURES[figure](run)


def _fig_order(name):
    return (0, 0) if name == "table1" else (1, int(name[3:]))


# ----------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--mesh", help="read the mesh from an MSH 2.2 file instead of generating it")
    common.add_argument("--out", help=f"output directory (env {OUT_ENV} overrides)")
    common.add_argument("--preset", help="grid preset: coarse, basic or fine")
    common.add_argument("--arrangement", choices=ARRANGEMENTS)
    common.add_argument("--threads", type=int, help="number of solver threads")
    common.add_argument("--seed", type=int, help="mesh generator tie-breaking seed")
    common.add_argument("--t-end", type=float, dest="t_end", help="override the final time")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="tubeox", description="Flow and oxide growth in cross-flow tube bundles.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("mesh", parents=[common], help="generate and validate a mesh")
    sub.add_parser("flow", parents=[common], help="steady Navier-Stokes solve")
    sub.add_parser("oxidize", parents=[common], help="transient oxidant transport and film growth")
    sub.add_parser("post", parents=[common], help="recompute analyses from stored results")
    r = sub.add_parser("reproduce", parents=[common], help="run a figure/table preset end to end")
    r.add_argument("figure", help="table1, fig7 ... fig26")
    return p


def _configure(args):
    from .config import SimConfig, config_from_dict, load_config
    cfg = load_config(args.config) if args.config else SimConfig()
    over = {}
    if args.mesh:
        over["mesh_path"] = args.mesh
    if args.preset:
        over["grid"] = args.preset
    if args.arrangement:
        over["arrangement"] = args.arrangement
    if args.seed is not None:
        over["seed"] = args.seed
    if args.t_end is not None:
        over["t_end"] = args.t_end
    cfg = config_from_dict(over, cfg) if over else cfg
    out = os.environ.get(OUT_ENV) or args.out or cfg.output_dir
    return cfg, Path(out)


COMMANDS = {"mesh": cmd_mesh, "flow": cmd_flow, "oxidize": cmd_oxidize, "post": cmd_post,
            "reproduce": cmd_reproduce}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "MKL_NUM_THREADS", "OPENBLAS_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    from .errors import TubeOxError
    try:
        cfg, out = _configure(args)
        try:
            run = Runner(cfg, out)
        except OSError as exc:
            from .errors import OutputError
            raise OutputError(f"cannot create output directory {out}: {exc.strerror}") from None
        summary = COMMANDS[args.command](run, args)
    except TubeOxError as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        print(json.dumps(err), file=sys.stderr)
        return exc.exit_code
    except MemoryError as exc:
        print(json.dumps({"error": "MemoryError", "message": str(exc), "exit_code": 3}), file=sys.stderr)
        return 3
    print(json.dumps({"command": args.command, "out": str(run.out), "summary": summary}, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
