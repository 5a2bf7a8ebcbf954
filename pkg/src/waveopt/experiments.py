"""Convergence studies, adaptivity, nested iteration, spectral verification
and the regularization-parameter sweep.

Level l of the uniform hierarchy has axis spacing 2^(-(l+1)) on every
coordinate, so level 1 is the 125-vertex/384-tetrahedron mesh for d=2.
Uniform studies couple the regularization constant to that spacing
(rho = h^4 for L2, h^2 for energy); adaptive runs switch to the per-element
variable weight h_tau^r with h_tau = |tau|^(1/(d+1)).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import (
    assemble_mass,
    assemble_spacetime_stiffness,
    assemble_wave,
    assemble_target_load,
)
from .fespace import build_space, prolongate, NodalField
from .krylov import lanczos_extreme_eigs, pcg
from .mesh import build_initial_mesh, refine_adaptive, refine_uniform
from .ocp import (
    RHO_EXPONENT,
    build_problem,
    solve_bp_pcg,
    solve_pgmres,
    solve_sc_pcg,
)
from .quadrature import rule_for_class
from .targets import make_target

__all__ = [
    "ConvergenceRow",
    "AdaptivityConfig",
    "SpectralReport",
    "axis_spacing",
    "uniform_mesh",
    "l2_error",
    "h1_seminorm",
    "h1_error",
    "eoc_sequence",
    "maximum_marking",
    "run_uniform_study",
    "run_adaptive_nested",
    "verify_spectral_equivalence",
    "run_rho_sweep_1d",
]

_ERR_CHUNK_POINTS = 3_000_000  # element*quadrature products per batch

SOLVER_IDS = ("sc", "sc-cg", "sc-lumped", "sc-amg", "bp", "gmres")


@dataclass
class ConvergenceRow:
    level: int
    n_vertices: int
    n_dofs: int
    error: float
    eoc: float | None
    iterations: dict
    wall_time: float
    mesh_checksum: str = ""


@dataclass
class AdaptivityConfig:
    theta: float = 0.5
    alpha: float = 0.4
    beta: float = 0.5
    max_levels: int = 7
    inner_cycles: int = 3  # AMG V-cycles inside the energy Schur operator
    coarse_tol: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("marking parameter theta must lie in (0, 1]")


@dataclass
class SpectralReport:
    level: int
    regularization: str
    n_dofs: int
    lam_min: float
    lam_max: float
    lam_min_bound: float  # 1/(d+3)
    lam_min_ok: bool
    c_inv_estimate: float
    ritz_residuals: tuple


def axis_spacing(level):
    """Grid spacing of uniform level l on the unit cylinder: 2^-(l+1)."""
    return 2.0 ** -(level + 1)


def uniform_mesh(d, level):
    """Level-l uniform mesh: 2^(l+1) cells per axis, built by red refinement."""
    if level < 1:
        raise ValueError("levels are counted from 1")
    mesh = build_initial_mesh(d, 5)
    for _ in range(level - 1):
        mesh = refine_uniform(mesh)
    return mesh


def _eval_batches(mesh, bary, n_cols):
    qpts = bary.shape[0]
    chunk = max(1, _ERR_CHUNK_POINTS // (qpts * max(n_cols, 1)))
    for start in range(0, mesh.n_elements, chunk):
        yield slice(start, min(start + chunk, mesh.n_elements))


def l2_error(y, target, return_per_element=False):
    """||y_h - y_d||_{L2(Q)}; optionally the per-element squared contributions.

    Quadrature follows the target smoothness class, the same policy used for
    load assembly.
    """
    space = y.space
    mesh = space.mesh
    bary, w = rule_for_class(target.smoothness_class, mesh.simplex_dim)
    vv = y.vertex_values()
    vol = mesh.volumes()
    per = np.zeros(mesh.n_elements)
    coords = mesh.element_coords()
    for sl in _eval_batches(mesh, bary, mesh.dim_d + 1):
        pts = np.einsum("qa,eac->eqc", bary, coords[sl])
        fv = target.eval(pts)
        yh = np.einsum("qa,ea->eq", bary, vv[mesh.elements[sl]])
        per[sl] = ((yh - fv) ** 2) @ w * vol[sl]
    total = float(np.sqrt(per.sum()))
    if return_per_element:
        return total, per
    return total


def target_norm(target, mesh):
    """||y_d||_{L2(Q)} under the target's own quadrature policy."""
    space = build_space(mesh, "free")
    zero = NodalField(space, np.zeros(space.n_dofs))
    return l2_error(zero, target)


def _stiffness_for(space):
    cache = space.mesh._cache
    key = ("h1_stiffness", space.kind)
    if key not in cache:
        cache[key] = assemble_spacetime_stiffness(space)
    return cache[key]


def h1_seminorm(fld):
    """|v_h|_{H1(Q)} = sqrt(v^T K v) with the unweighted space-time stiffness."""
    K = _stiffness_for(fld.space)
    return float(np.sqrt(max(fld.values @ (K @ fld.values), 0.0)))


def h1_error(y, target):
    """|y_h - y_d|_{H1(Q)} by quadrature; needs the target's analytic gradient."""
    if target.grad is None:
        raise ValueError(f"target {target.name!r} has no analytic gradient")
    space = y.space
    mesh = space.mesh
    bary, w = rule_for_class(target.smoothness_class, mesh.simplex_dim)
    vv = y.vertex_values()
    vol = mesh.volumes()
    coords = mesh.element_coords()
    from .assembly import _geometry

    _, grads = _geometry(mesh)
    gy = np.einsum("ea,eac->ec", vv[mesh.elements], grads)  # constant per element
    total = 0.0
    for sl in _eval_batches(mesh, bary, mesh.dim_d + 1):
        pts = np.einsum("qa,eac->eqc", bary, coords[sl])
        gt = target.grad(pts)  # (e, q, d+1)
        diff = gy[sl][:, None, :] - gt
        total += float(np.einsum("eqc,eqc,q,e->", diff, diff, w, vol[sl]))
    return float(np.sqrt(max(total, 0.0)))


def eoc_sequence(errors):
    """EOC against uniform halving: log2(e_{l-1}/e_l), None on the first level."""
    out = [None]
    for prev, cur in zip(errors, errors[1:]):
        out.append(float(np.log2(prev / cur)))
    return out


def maximum_marking(per_element_sq, theta):
    """Elements whose error indicator reaches theta times the largest one.

    Operates on squared per-element contributions, so the comparison uses
    sqrt to match the indicator definition.
    """
    ind = np.sqrt(np.maximum(per_element_sq, 0.0))
    return np.flatnonzero(ind >= theta * ind.max())


def solve_with(prob, solver_id, tol=1e-11, x0=None, inner_cycles=3):
    """Dispatch a solve by solver id ('sc', 'sc-cg', 'sc-lumped', 'sc-amg',
    'bp', 'gmres')."""
    if solver_id == "sc":
        return solve_sc_pcg(prob, inner="exact", tol=tol, x0=x0)
    if solver_id == "sc-lumped":
        return solve_sc_pcg(prob, inner="lumped", tol=tol, x0=x0)
    if solver_id == "sc-amg":
        return solve_sc_pcg(prob, inner=("amg", inner_cycles), tol=tol, x0=x0)
    if solver_id == "bp":
        return solve_bp_pcg(prob, tol=tol)
    if solver_id == "gmres":
        return solve_pgmres(prob, tol=tol)
    if solver_id == "sc-cg":
        # unpreconditioned CG on the exact Schur complement
        from .ocp import _inner_inverse, _normalize_inner, SolveResult, _wrap_fields
        from .ocp import _adjoint_residual, _state_residual

        mode, cycles = _normalize_inner(prob, "exact")
        apply_ainv, counter = _inner_inverse(prob, mode, cycles)
        B, M = prob.B, prob.M

        def apply_s(yv):
            return B.T @ apply_ainv(B @ yv) + M @ yv

        yv, stats = pcg(apply_s, None, prob.load, x0=x0, rel_tol=tol,
                        max_iter=20000)
        if not stats.converged:
            raise RuntimeError(f"SC-CG failed: {stats.stop_reason}")
        pv = -apply_ainv(B @ yv)
        y_f, p_f, u_f = _wrap_fields(prob, yv, pv)
        return SolveResult(
            y=y_f, p=p_f, u=u_f, stats=stats, solver_id="sc_cg",
            residual_adjoint=_adjoint_residual(prob, pv, yv, mode),
            residual_state=_state_residual(prob, pv, yv),
        )
    raise ValueError(f"unknown solver {solver_id!r}; expected one of {SOLVER_IDS}")


def _share_hierarchy(prob, cache, key):
    if prob.regularization == "energy":
        if key in cache:
            prob._amg = cache[key]
        else:
            cache[key] = prob.amg_hierarchy()


def run_uniform_study(d, regularization, target_name, levels,
                      solvers=("sc", "bp", "gmres"), tol=1e-11,
                      lumped=False, inner_cycles=3, progress=None):
    """Refine uniformly, solve with every requested solver, report errors/EOC.

    The regularization constant follows the level spacing (h^4 or h^2); the
    reported error comes from the first solver in the list.  With ``lumped``
    the first solver is forced to the mass-lumped Schur variant (L2 only).
    """
    if levels < 1:
        raise ValueError("levels must be at least 1")
    solvers = list(solvers)
    if lumped:
        solvers = ["sc-lumped"] + [s for s in solvers if s != "sc-lumped"]
    target = make_target(target_name, d)
    r = RHO_EXPONENT[regularization]
    rows = []
    errors = []
    mesh = None
    amg_cache = {}
    for level in range(1, levels + 1):
        mesh = uniform_mesh(d, level) if mesh is None else refine_uniform(mesh)
        rho = axis_spacing(level) ** r
        prob = build_problem(mesh, regularization, target, rho_value=rho)
        _share_hierarchy(prob, amg_cache, level)
        iterations = {}
        start = time.perf_counter()
        y_first = None
        for sid in solvers:
            res = solve_with(prob, sid, tol=tol, inner_cycles=inner_cycles)
            iterations[sid] = res.stats.iterations
            if y_first is None:
                y_first = res.y
        wall = time.perf_counter() - start
        err = l2_error(y_first, target)
        errors.append(err)
        rows.append(ConvergenceRow(
            level=level, n_vertices=mesh.n_vertices, n_dofs=prob.n,
            error=err, eoc=None, iterations=iterations, wall_time=wall,
            mesh_checksum=mesh.checksum(),
        ))
        if progress:
            progress(rows[-1])
    for row, e in zip(rows, eoc_sequence(errors)):
        row.eoc = e
    return rows


def run_adaptive_nested(d, regularization, target_name, config=None,
                        uniform=True, tol=1e-11, progress=None):
    """Nested iteration over a refined hierarchy with prolongated guesses.

    The coarsest level is solved to ``config.coarse_tol``; level l >= 2 stops
    at the relative threshold alpha * (N_{l-1}/N_l)^(beta/3), the tolerance
    tightening with the growth of the vertex count N.  Uniform runs keep the
    level-coupled constant rho; adaptive runs mark elements by the maximum
    strategy and use the local weight h_tau^r.
    """
    config = config or AdaptivityConfig()
    target = make_target(target_name, d)
    r = RHO_EXPONENT[regularization]
    inner = "lumped" if regularization == "l2" else ("amg", config.inner_cycles)
    mesh = uniform_mesh(d, 1)
    rows = []
    errors = []
    prev = None  # (problem, y field)
    amg_cache = {}
    for level in range(1, config.max_levels + 1):
        if level > 1:
            if uniform:
                mesh = refine_uniform(mesh)
            else:
                _, per = l2_error(prev[1], target, return_per_element=True)
                marked = maximum_marking(per, config.theta)
                mesh = refine_adaptive(prev[0].mesh, marked)
        if uniform:
            prob = build_problem(mesh, regularization, target,
                                 rho_value=axis_spacing(level) ** r)
        else:
            prob = build_problem(mesh, regularization, target, rho_mode="local")
        _share_hierarchy(prob, amg_cache, mesh.checksum())
        if level == 1:
            level_tol = config.coarse_tol
            x0 = None
        else:
            ratio = prev[0].mesh.n_vertices / mesh.n_vertices
            level_tol = min(config.alpha * ratio ** (config.beta / 3.0), 0.9)
            x0 = prolongate(prev[1], prob.Yh).values
        start = time.perf_counter()
        res = solve_sc_pcg(prob, inner=inner, tol=level_tol, x0=x0)
        wall = time.perf_counter() - start
        err = l2_error(res.y, target)
        errors.append(err)
        rows.append(ConvergenceRow(
            level=level, n_vertices=mesh.n_vertices, n_dofs=prob.n,
            error=err, eoc=None, iterations={"sc-nested": res.stats.iterations},
            wall_time=wall, mesh_checksum=mesh.checksum(),
        ))
        if progress:
            progress(rows[-1])
        prev = (prob, res.y)
    if uniform:
        for row, e in zip(rows, eoc_sequence(errors)):
            row.eoc = e
    return rows


def verify_spectral_equivalence(prob, level=0, iters=120, seed=0):
    """Lanczos estimates of the extreme eigenvalues of (S, lump(M)).

    S uses the exact inner solve, so the estimates target the Schur
    complement of the assembled system.  The lower bound checked is the sharp
    local mass-lumping constant 1/(d+3); the implied inverse-inequality
    constant is backed out of the upper bound lam_max <= c^kappa + 1 with
    kappa = 4 (L2) or 2 (energy).
    """
    from .ocp import _inner_inverse

    apply_ainv, _ = _inner_inverse(prob, "exact", None)
    B, M = prob.B, prob.M

    def apply_s(yv):
        return B.T @ apply_ainv(B @ yv) + M @ yv

    est = lanczos_extreme_eigs(apply_s, prob.D, iters=iters, seed=seed)
    d = prob.mesh.dim_d
    bound = 1.0 / (d + 3.0)
    kappa = RHO_EXPONENT[prob.regularization]
    c_inv = max(est.lam_max - 1.0, 0.0) ** (1.0 / kappa)
    return SpectralReport(
        level=level,
        regularization=prob.regularization,
        n_dofs=prob.n,
        lam_min=est.lam_min,
        lam_max=est.lam_max,
        lam_min_bound=bound,
        lam_min_ok=bool(est.lam_min >= bound - 1e-8),
        c_inv_estimate=float(c_inv),
        ritz_residuals=(est.residual_min, est.residual_max),
    )


def _sid_solve_scaled(Mbar, B, M, load, rho):
    """Sparse direct solve of the indefinite system, sqrt(rho)-equilibrated.

    Solves the constant-rho system exactly (A = rho^(-1) Mbar) in the scaled
    variable ptilde = p / sqrt(rho), which keeps the factorization well
    conditioned across the whole sweep range.
    """
    s = 1.0 / np.sqrt(rho)
    m, n = B.shape
    K = sp.bmat([[s * Mbar, B], [B.T, -s * M]], format="csc")
    rhs = np.concatenate([np.zeros(m), -s * load])
    sol = spla.splu(K).solve(rhs)
    ptilde, y = sol[:m], sol[m:]
    return np.sqrt(rho) * ptilde, y


def trusted_prefix(values, drop=0.05):
    """Longest prefix along which the values keep decreasing by >= drop.

    Returns the number of trusted points (at least 2 when available).
    """
    k = 1
    while k < len(values) and values[k] <= (1.0 - drop) * values[k - 1]:
        k += 1
    return max(k, min(2, len(values)))


def fit_slope(rhos, values):
    """OLS slope of log2(value) against log2(rho)."""
    x = np.log2(np.asarray(rhos, dtype=float))
    yv = np.log2(np.asarray(values, dtype=float))
    x = x - x.mean()
    return float((x @ (yv - yv.mean())) / (x @ x))


def run_rho_sweep_1d(target_name, rho_list, n_cells=128):
    """L2-regularized solves at fixed rho values on one fine d=1 mesh.

    Returns (rows, slopes, saturation_rho): rows hold
    (rho, ||y_d - y||_L2, |y_d - y|_H1, |p|_H1); slopes are fitted on the
    trusted (pre-saturation) range of the L2 error; saturation_rho is the
    first swept value where the L2 error stops improving (None if absent).
    """
    target = make_target(target_name, 1)
    mesh = build_initial_mesh(1, n_cells + 1)
    Yh = build_space(mesh, "state")
    Ph = build_space(mesh, "adjoint")
    B = assemble_wave(Yh, Ph)
    M = assemble_mass(Yh)
    Mbar = assemble_mass(Ph)
    Kp = assemble_spacetime_stiffness(Ph)
    load = assemble_target_load(Yh, target)
    rhos = sorted((float(r) for r in rho_list), reverse=True)
    rows = []
    for rho in rhos:
        p, y = _sid_solve_scaled(Mbar, B, M, load, rho)
        y_f = NodalField(Yh, y)
        p_f = NodalField(Ph, p)
        rows.append((
            rho,
            l2_error(y_f, target),
            h1_error(y_f, target),
            float(np.sqrt(max(p @ (Kp @ p), 0.0))),
        ))
    errs = [r[1] for r in rows]
    k = trusted_prefix(errs)
    slopes = {
        "l2": fit_slope(rhos[:k], [r[1] for r in rows[:k]]),
        "h1": fit_slope(rhos[:k], [r[2] for r in rows[:k]]),
        "p_h1": fit_slope(rhos[:k], [r[3] for r in rows[:k]]),
    }
    saturation = rhos[k] if k < len(rhos) else None
    return rows, slopes, saturation
