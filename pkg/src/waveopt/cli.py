"""Command-line driver: mesh | solve | study | nested | verify | sweep.

Defaults follow the reference experiment settings (stopping tolerance 1e-11,
marking theta 0.5, block-preconditioner scaling 0.98 for L2 and 0.25 for the
energy regularization, 2+2 Gauss-Seidel smoothing, 2 V-cycles inside the
GMRES preconditioner and 3 inner cycles for nested energy runs).  Flags
override entries of an optional flat ``key = value`` config file; reruns with
the same configuration write bitwise-identical CSVs.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import experiments as xp
from . import reporting as rpt
from .mesh import boundary_facets, save_mesh, shape_regularity, write_vtk
from .ocp import build_problem
from .targets import make_target


def parse_config_file(path):
    out = {}
    with open(path) as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line (expected key = value): {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = val
    return out


def parse_rho_spec(spec):
    """'2^-14..2^-23' or a comma list of floats/powers."""
    def one(tok):
        tok = tok.strip()
        if "^" in tok:
            base, expo = tok.split("^")
            return float(base) ** float(expo)
        return float(tok)

    if ".." in spec:
        lo, hi = spec.split("..")
        a, b = one(lo), one(hi)
        if "^" in lo and "^" in hi:
            base = float(lo.split("^")[0])
            e0, e1 = float(lo.split("^")[1]), float(hi.split("^")[1])
            step = 1.0 if e1 >= e0 else -1.0
            exps = np.arange(e0, e1 + step / 2, step)
            return [base**e for e in exps]
        return list(np.geomspace(a, b, num=10))
    return [one(t) for t in spec.split(",")]


def _merge(args, file_cfg, key, cast, default):
    """Explicit flag > config file > default."""
    val = getattr(args, key, None)
    if val is not None:
        return val
    if key in file_cfg:
        raw = file_cfg[key]
        if cast is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return cast(raw)
    return default


def _out_dir(args):
    out = args.out or "results"
    os.makedirs(out, exist_ok=True)
    return out


def _study_cell(task):
    (d, reg, target, levels, solvers, tol, lumped, cycles) = task
    rows = xp.run_uniform_study(d, reg, target, levels, solvers=solvers,
                                tol=tol, lumped=lumped, inner_cycles=cycles)
    return target, rows


def cmd_mesh(args, cfg):
    out = _out_dir(args)
    d = _merge(args, cfg, "d", int, 2)
    level = _merge(args, cfg, "level", int, 1)
    mesh = xp.uniform_mesh(d, level)
    _, tags = boundary_facets(mesh)
    print(f"d={d} level={level}: {mesh.n_vertices} vertices, "
          f"{mesh.n_elements} elements, volume {mesh.volumes().sum():.12f}, "
          f"shape regularity {shape_regularity(mesh):.3f}, "
          f"boundary facets {tags.size}")
    if args.vtk:
        path = os.path.join(out, f"mesh_d{d}_l{level}.vtk")
        write_vtk(mesh, path)
        print("wrote", path)
    if args.snapshot:
        path = os.path.join(out, f"mesh_d{d}_l{level}.bin")
        save_mesh(mesh, path)
        print("wrote", path)
    return 0


def cmd_solve(args, cfg):
    out = _out_dir(args)
    d = _merge(args, cfg, "d", int, 2)
    level = _merge(args, cfg, "level", int, 2)
    reg = _merge(args, cfg, "reg", str, "l2")
    target_name = _merge(args, cfg, "target", str, "smooth")
    solver = _merge(args, cfg, "solver", str, "sc")
    tol = _merge(args, cfg, "tol", float, 1e-11)
    cycles = _merge(args, cfg, "inner_cycles", int, 3)
    mesh = xp.uniform_mesh(d, level)
    target = make_target(target_name, d)
    rho = xp.axis_spacing(level) ** xp.RHO_EXPONENT[reg]
    prob = build_problem(mesh, reg, target, rho_value=rho)
    res = xp.solve_with(prob, solver, tol=tol, inner_cycles=cycles)
    err = xp.l2_error(res.y, target)
    print(f"{solver}: {res.stats.iterations} iterations, L2 error {err:.6e}, "
          f"state residual {res.residual_state:.2e}")
    config = dict(command="solve", d=d, level=level, reg=reg, target=target_name,
                  solver=solver, tol=tol, inner_cycles=cycles)
    base = os.path.join(out, f"solve_{reg}_{target_name}_d{d}_l{level}_{solver}")
    rpt.write_csv(base + ".csv",
                  ["Solver", "Level", "Vertices", "Dofs", "Iterations", "L2Error"],
                  [[solver, level, mesh.n_vertices, prob.n,
                    res.stats.iterations, err]])
    rpt.write_manifest(base + ".manifest", config,
                       extras={"mesh_checksum": mesh.checksum()})
    with open(base + ".summary.txt", "w") as f:
        f.write(res.summary() + "\n")
    if args.vtk:
        fields = {"state": res.y.vertex_values(), "adjoint": res.p.vertex_values()}
        if res.u is not None:
            fields["control"] = res.u.vertex_values()
        write_vtk(mesh, base + ".vtk", fields)
        print("wrote", base + ".vtk")
    print("wrote", base + ".csv")
    return 0


def cmd_study(args, cfg):
    out = _out_dir(args)
    d = _merge(args, cfg, "d", int, 2)
    reg = _merge(args, cfg, "reg", str, "l2")
    targets = _merge(args, cfg, "target", str, "smooth").split(",")
    levels = _merge(args, cfg, "levels", int, 4)
    solvers = _merge(args, cfg, "solvers", str, "sc,bp,gmres").split(",")
    tol = _merge(args, cfg, "tol", float, 1e-11)
    lumped = bool(args.lumped) or cfg.get("lumped", "").lower() in ("1", "true")
    cycles = _merge(args, cfg, "inner_cycles", int, 3)
    jobs = _merge(args, cfg, "jobs", int, 1)

    tasks = [(d, reg, t, levels, tuple(solvers), tol, lumped, cycles)
             for t in targets]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_study_cell, tasks))
    else:
        results = [_study_cell(t) for t in tasks]

    status = 0
    used_solvers = (["sc-lumped"] + [s for s in solvers if s != "sc-lumped"]
                    if lumped else solvers)
    for target_name, rows in results:
        base = os.path.join(out, f"study_{reg}_{target_name}_d{d}")
        header, data = rpt.convergence_rows_to_csv(rows, used_solvers)
        rpt.write_csv(base + ".csv", header, data)
        config = dict(command="study", d=d, reg=reg, target=target_name,
                      levels=levels, solvers=",".join(used_solvers), tol=tol,
                      lumped=lumped, inner_cycles=cycles)
        extras = {f"wall_time_level_{r.level}": f"{r.wall_time:.3f}" for r in rows}
        extras.update({f"mesh_checksum_level_{r.level}": r.mesh_checksum
                       for r in rows})
        rpt.write_manifest(base + ".manifest", config, extras)
        rpt.convergence_figure(
            base + ".png",
            [(target_name, [r.n_vertices for r in rows], [r.error for r in rows])],
            title=f"{reg} regularization, d={d}",
            guides=[(2.0, "h^2", d), (0.5, "h^0.5", d)],
        )
        print("wrote", base + ".csv")
    return status


def cmd_nested(args, cfg):
    out = _out_dir(args)
    d = _merge(args, cfg, "d", int, 2)
    reg = _merge(args, cfg, "reg", str, "l2")
    target_name = _merge(args, cfg, "target", str, "discontinuous")
    levels = _merge(args, cfg, "levels", int, 5)
    adaptive = bool(args.adaptive) or cfg.get("adaptive", "").lower() in ("1", "true")
    theta = _merge(args, cfg, "theta", float, 0.5)
    default_alpha = 0.4 if reg == "l2" else 0.5
    alpha = _merge(args, cfg, "alpha", float, default_alpha)
    beta = _merge(args, cfg, "beta", float, 0.75 if adaptive else 0.5)
    cycles = _merge(args, cfg, "inner_cycles", int, 3)
    config = xp.AdaptivityConfig(theta=theta, alpha=alpha, beta=beta,
                                 max_levels=levels, inner_cycles=cycles)
    rows = xp.run_adaptive_nested(d, reg, target_name, config,
                                  uniform=not adaptive)
    mode = "adaptive" if adaptive else "uniform"
    base = os.path.join(out, f"nested_{reg}_{target_name}_d{d}_{mode}")
    header, data = rpt.convergence_rows_to_csv(rows, ["sc-nested"])
    rpt.write_csv(base + ".csv", header, data)
    rpt.write_manifest(base + ".manifest",
                       dict(command="nested", d=d, reg=reg, target=target_name,
                            levels=levels, mode=mode, theta=theta, alpha=alpha,
                            beta=beta, inner_cycles=cycles),
                       extras=dict(
                           **{f"wall_time_level_{r.level}": f"{r.wall_time:.3f}"
                              for r in rows},
                           **{f"mesh_checksum_level_{r.level}": r.mesh_checksum
                              for r in rows}))
    rpt.convergence_figure(
        base + ".png",
        [(f"{target_name} ({mode})", [r.n_vertices for r in rows],
          [r.error for r in rows])],
        title=f"nested iteration, {reg}, d={d}", guides=[(0.5, "h^0.5", d)],
    )
    print("wrote", base + ".csv")
    return 0


def cmd_verify(args, cfg):
    out = _out_dir(args)
    d = _merge(args, cfg, "d", int, 1)
    levels = _merge(args, cfg, "levels", int, 4)
    reg_opt = _merge(args, cfg, "reg", str, "both")
    regs = ("l2", "energy") if reg_opt == "both" else (reg_opt,)
    rows = []
    hierarchy_texts = []
    for reg in regs:
        for level in range(1, levels + 1):
            mesh = xp.uniform_mesh(d, level)
            rho = xp.axis_spacing(level) ** xp.RHO_EXPONENT[reg]
            prob = build_problem(mesh, reg, make_target("smooth", d), rho_value=rho)
            rep = xp.verify_spectral_equivalence(prob, level=level)
            rows.append([reg, level, rep.n_dofs, rep.lam_min, rep.lam_max,
                         rep.lam_min_bound, rep.lam_min_ok, rep.c_inv_estimate])
            print(f"{reg} level {level}: lam_min {rep.lam_min:.6f} "
                  f"(bound {rep.lam_min_bound:.6f}), lam_max {rep.lam_max:.4f}")
            if args.amg and reg == "energy":
                hierarchy_texts.append(
                    f"# level {level}\n" + prob.amg_hierarchy().stats_text()
                )
    base = os.path.join(out, f"spectral_d{d}")
    rpt.write_csv(base + ".csv",
                  ["Reg", "Level", "Dofs", "LambdaMin", "LambdaMax",
                   "LowerBound", "BoundOK", "CInvEstimate"],
                  rows)
    rpt.write_manifest(base + ".manifest",
                       dict(command="verify", d=d, levels=levels,
                            reg=reg_opt, spectral=True, lanczos_seed=0))
    if hierarchy_texts:
        with open(base + "_amg.txt", "w") as f:
            f.write("\n\n".join(hierarchy_texts) + "\n")
    print("wrote", base + ".csv")
    ok = all(r[6] for r in rows)
    return 0 if ok else 1


def cmd_sweep(args, cfg):
    out = _out_dir(args)
    target_name = _merge(args, cfg, "target", str, "appendix2")
    rho_spec = _merge(args, cfg, "rho", str, "2^-14..2^-23")
    cells = _merge(args, cfg, "cells", int, 128)
    rho_list = parse_rho_spec(rho_spec)
    rows, slopes, saturation = xp.run_rho_sweep_1d(target_name, rho_list,
                                                   n_cells=cells)
    base = os.path.join(out, f"sweep_{target_name}_{cells}")
    rpt.write_csv(base + ".csv",
                  ["Rho", "L2Error", "H1Error", "AdjointH1"],
                  rows)
    rpt.write_manifest(base + ".manifest",
                       dict(command="sweep", target=target_name, rho=rho_spec,
                            cells=cells),
                       extras={"slope_l2": slopes["l2"],
                               "slope_h1": slopes["h1"],
                               "slope_p_h1": slopes["p_h1"],
                               "saturation_rho": saturation})
    rpt.sweep_figure(base + ".png", rows, slopes,
                     title=f"rho sweep, target {target_name}, {2*cells*cells} elements")
    print(f"slopes: L2 {slopes['l2']:.3f}, H1 {slopes['h1']:.3f}, "
          f"adjoint H1 {slopes['p_h1']:.3f}; saturation at {saturation}")
    print("wrote", base + ".csv")
    return 0


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="flat key = value config file")
    shared.add_argument("--out", help="output directory (default ./results)")
    ap = argparse.ArgumentParser(
        prog="waveopt",
        description="Space-time FEM solvers for wave-equation optimal control",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--d", type=int)
        p.add_argument("--reg", choices=("l2", "energy", "both"))
        p.add_argument("--target")
        p.add_argument("--tol", type=float)
        p.add_argument("--inner-cycles", dest="inner_cycles", type=int)

    p = sub.add_parser("mesh", parents=[shared],
                       help="build/refine a mesh and report stats")
    p.add_argument("--d", type=int)
    p.add_argument("--level", type=int)
    p.add_argument("--vtk", action="store_true")
    p.add_argument("--snapshot", action="store_true")

    p = sub.add_parser("solve", parents=[shared],
                       help="single solve on a uniform level")
    add_common(p)
    p.add_argument("--level", type=int)
    p.add_argument("--solver", choices=xp.SOLVER_IDS)
    p.add_argument("--vtk", action="store_true")

    p = sub.add_parser("study", parents=[shared],
                       help="uniform convergence study")
    add_common(p)
    p.add_argument("--levels", type=int)
    p.add_argument("--solvers", help="comma list from " + ",".join(xp.SOLVER_IDS))
    p.add_argument("--lumped", action="store_true",
                   help="report errors from the mass-lumped Schur solve")
    p.add_argument("--jobs", type=int)

    p = sub.add_parser("nested", parents=[shared], help="nested iteration run")
    add_common(p)
    p.add_argument("--levels", type=int)
    p.add_argument("--adaptive", action="store_true")
    p.add_argument("--theta", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)

    p = sub.add_parser("verify", parents=[shared],
                       help="spectral-equivalence verification")
    p.add_argument("--d", type=int)
    p.add_argument("--reg", choices=("l2", "energy", "both"))
    p.add_argument("--levels", type=int)
    p.add_argument("--spectral", action="store_true", default=True)
    p.add_argument("--amg", action="store_true",
                   help="dump AMG hierarchy statistics")

    p = sub.add_parser("sweep", parents=[shared],
                       help="regularization-parameter sweep (d=1)")
    p.add_argument("--target")
    p.add_argument("--rho", help="e.g. 2^-14..2^-23 or comma list")
    p.add_argument("--cells", type=int)
    return ap


COMMANDS = {
    "mesh": cmd_mesh,
    "solve": cmd_solve,
    "study": cmd_study,
    "nested": cmd_nested,
    "verify": cmd_verify,
    "sweep": cmd_sweep,
}


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    cfg = parse_config_file(args.config) if args.config else {}
    try:
        return COMMANDS[args.command](args, cfg)
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
