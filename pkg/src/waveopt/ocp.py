"""Solver pipelines for the reduced space-time optimality system.

The discrete system couples the adjoint and state coefficient vectors as

    [ A   B ] [p]   [ 0  ]
    [ B^T -M ] [y] = [-b_d]

with A the rho^(-1)-weighted adjoint mass matrix (L2 regularization) or the
rho^(-1)-weighted space-time stiffness (energy regularization), B the wave
matrix, M the state mass matrix and b_d the target load.  Three routes solve
it: PCG on the Schur complement S = B^T A^(-1) B + M preconditioned by the
lumped mass matrix, conjugate gradients on the transformed
symmetric-positive-definite block system (solve_bp_pcg), and block-diagonally
preconditioned full GMRES on the equivalent positive definite form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import amg as amg_mod
from .assembly import (
    RegularizationField,
    assemble_mass,
    assemble_spacetime_stiffness,
    assemble_target_load,
    assemble_wave,
    lump,
)
from .fespace import NodalField, build_space
from .krylov import SolveStats, gmres, pcg

__all__ = [
    "OcpProblem",
    "SolveResult",
    "build_problem",
    "solve_sc_pcg",
    "solve_bp_pcg",
    "solve_pgmres",
    "solve_dense",
    "recover_control",
]

REGULARIZATIONS = ("l2", "energy")
RHO_EXPONENT = {"l2": 4, "energy": 2}

DEFAULT_TOL = 1e-11
INNER_TOL = 1e-12
BP_DELTA = {"l2": 0.98, "energy": 0.25}


@dataclass
class OcpProblem:
    mesh: object
    Yh: object
    Ph: object
    regularization: str
    rho: RegularizationField
    target: object
    B: sp.csr_matrix  # m x n wave matrix
    M: sp.csr_matrix  # n x n state mass
    D: np.ndarray  # lump(M)
    A: sp.csr_matrix  # m x m regularization matrix
    Dbar: np.ndarray | None  # lump(A), L2 only
    load: np.ndarray
    amg_config: amg_mod.AmgConfig | None = None
    _amg: amg_mod.AmgHierarchy | None = None

    @property
    def n(self):
        return self.Yh.n_dofs

    @property
    def m(self):
        return self.Ph.n_dofs

    def amg_hierarchy(self):
        """Hierarchy for the energy regularization matrix, built once."""
        if self.regularization != "energy":
            raise ValueError("AMG hierarchy only applies to the energy regularization")
        if self._amg is None:
            self._amg = amg_mod.setup(self.A, self.amg_config or amg_mod.AmgConfig())
            amg_mod.estimate_contraction(self._amg)
        return self._amg


def build_problem(mesh, regularization, target, rho=None, rho_mode="constant",
                  rho_value=None, amg_config=None):
    """Assemble every matrix of the optimality system on the given mesh.

    ``rho`` may be a prebuilt :class:`RegularizationField`; otherwise it is
    constructed as a constant field from ``rho_value`` or, with
    ``rho_mode='local'``, as h_tau**r with the exponent matching the
    regularization (4 for L2, 2 for energy).
    """
    if regularization not in REGULARIZATIONS:
        raise ValueError(f"unknown regularization {regularization!r}")
    if rho is None:
        if rho_mode == "constant":
            if rho_value is None:
                raise ValueError("constant regularization needs rho_value")
            rho = RegularizationField.constant(rho_value, mesh)
        elif rho_mode == "local":
            rho = RegularizationField.local(RHO_EXPONENT[regularization], mesh)
        else:
            raise ValueError(f"unknown rho_mode {rho_mode!r}")
    if rho.kind == "local" and rho.exponent != RHO_EXPONENT[regularization]:
        raise ValueError(
            f"local rho exponent {rho.exponent} does not match {regularization}"
        )
    Yh = build_space(mesh, "state")
    Ph = build_space(mesh, "adjoint")
    B = assemble_wave(Yh, Ph)
    M = assemble_mass(Yh)
    D = lump(M)
    if regularization == "l2":
        A = assemble_mass(Ph, weight=rho, inverse_weight=True)
        Dbar = lump(A)
    else:
        A = assemble_spacetime_stiffness(Ph, weight=rho, inverse_weight=True)
        Dbar = None
    load = assemble_target_load(Yh, target)
    return OcpProblem(
        mesh=mesh, Yh=Yh, Ph=Ph, regularization=regularization, rho=rho,
        target=target, B=B, M=M, D=D, A=A, Dbar=Dbar, load=load,
        amg_config=amg_config,
    )


@dataclass
class SolveResult:
    y: NodalField
    p: NodalField
    u: NodalField | None
    stats: SolveStats
    solver_id: str
    residual_adjoint: float  # ||A p + B y|| / ||b_d||, wrt the solved system
    residual_state: float  # ||B^T p - M y + b_d|| / ||b_d||

    def summary(self):
        """Structured-text serialization of the solve outcome."""
        lines = [
            f"solver = {self.solver_id}",
            f"iterations = {self.stats.iterations}",
            f"converged = {self.stats.converged}",
            f"stop_reason = {self.stats.stop_reason}",
            f"residual_adjoint = {self.residual_adjoint!r}",
            f"residual_state = {self.residual_state!r}",
            f"state_dofs = {self.y.space.n_dofs}",
            f"adjoint_dofs = {self.p.space.n_dofs}",
        ]
        for key, val in self.stats.extra.items():
            lines.append(f"{key} = {val}")
        return "\n".join(lines)


def _normalize_inner(prob, inner):
    """Inner A^(-1) mode: 'exact' | 'lumped' | ('amg', i)."""
    if inner == "exact":
        return "exact", None
    if inner == "lumped":
        if prob.regularization != "l2":
            raise ValueError("lumped inner solves apply to the L2 regularization only")
        return "lumped", None
    if isinstance(inner, tuple) and len(inner) == 2 and inner[0] == "amg":
        if prob.regularization != "energy":
            raise ValueError("AMG inner cycles apply to the energy regularization only")
        return "amg", int(inner[1])
    raise ValueError(f"unknown inner mode {inner!r}")


def _inner_inverse(prob, mode, cycles):
    """Return (apply, counter) realizing the chosen approximation of A^(-1)."""
    counter = {"iterations": 0}
    if mode == "lumped":
        dinv = 1.0 / prob.Dbar

        def apply(v):
            return dinv * v

        return apply, counter
    if mode == "amg":
        h = prob.amg_hierarchy()

        def apply(v):
            return amg_mod.vcycles(h, v, cycles)

        return apply, counter
    # exact: inner PCG down to a 1e-12 residual reduction
    if prob.regularization == "l2":
        prec = 1.0 / prob.A.diagonal()
    else:
        h = prob.amg_hierarchy()

        def prec(v):
            return amg_mod.vcycles(h, v, 1)

    A = prob.A

    def apply(v):
        w, st = pcg(A, prec, v, rel_tol=INNER_TOL, max_iter=2000)
        if not st.converged:
            raise RuntimeError(f"inner solve stagnated ({st.stop_reason})")
        counter["iterations"] += st.iterations
        return w

    return apply, counter


def _wrap_fields(prob, y, p):
    y_field = NodalField(prob.Yh, y)
    p_field = NodalField(prob.Ph, p)
    u_field = recover_control(prob, p_field) if prob.regularization == "l2" else None
    return y_field, p_field, u_field


def _state_residual(prob, p, y):
    b = prob.load
    scale = np.linalg.norm(b)
    r2 = prob.B.T @ p - prob.M @ y + b
    return float(np.linalg.norm(r2) / (scale if scale > 0 else 1.0))


def _adjoint_residual(prob, p, y, mode):
    scale = np.linalg.norm(prob.load)
    scale = scale if scale > 0 else 1.0
    if mode == "lumped":
        r1 = prob.Dbar * p + prob.B @ y
    elif mode == "amg":
        return 0.0  # p := -(I - E^i) A^(-1) B y holds by construction
    else:
        r1 = prob.A @ p + prob.B @ y
    return float(np.linalg.norm(r1) / scale)


def solve_sc_pcg(prob, inner="exact", tol=DEFAULT_TOL, max_iter=5000, x0=None):
    """PCG on the Schur complement system S y = b_d preconditioned by lump(M).

    ``inner`` picks the realization of A^(-1) inside the operator: an exact
    (1e-12) inner solve, the lumped diagonal (L2), or i multigrid V-cycles
    from zero (energy).  The adjoint is recovered as p = -A^(-1)(B y) with
    the same inner mode.
    """
    mode, cycles = _normalize_inner(prob, inner)
    apply_ainv, counter = _inner_inverse(prob, mode, cycles)
    B, M = prob.B, prob.M

    def apply_s(y):
        return B.T @ apply_ainv(B @ y) + M @ y

    y, stats = pcg(apply_s, 1.0 / prob.D, prob.load,
                   x0=None if x0 is None else np.asarray(x0, dtype=float),
                   rel_tol=tol, max_iter=max_iter)
    if not stats.converged:
        raise RuntimeError(f"SC-PCG failed: {stats.stop_reason}")
    p = -apply_ainv(B @ y)
    stats.extra["inner_iterations"] = counter["iterations"]
    stats.extra["inner_mode"] = mode if mode != "amg" else f"amg({cycles})"
    y_f, p_f, u_f = _wrap_fields(prob, y, p)
    return SolveResult(
        y=y_f, p=p_f, u=u_f, stats=stats, solver_id="sc_pcg",
        residual_adjoint=_adjoint_residual(prob, p, y, mode),
        residual_state=_state_residual(prob, p, y),
    )


def _bp_ahat_inverse(prob, delta, amg_cycles):
    """Inverse-apply of the scaled block preconditioner Ahat < A."""
    d = prob.mesh.dim_d
    if prob.regularization == "l2":
        if delta is None:
            delta = BP_DELTA["l2"]
        diag = delta / (d + 2.0) * prob.Dbar
        inv = 1.0 / diag

        def apply(v):
            return inv * v

        return apply, delta
    if delta is None:
        delta = BP_DELTA["energy"]
    h = prob.amg_hierarchy()
    # 5% safety inflation on the measured contraction bound
    eta = min(h.eta * 1.05, 0.999)
    return amg_mod.as_bp_block_preconditioner(h, delta, amg_cycles, eta), delta


def _check_ahat_below_a(prob, ahat_inv, probes=4, seed=3):
    """Randomized Rayleigh check of Ahat < A via eigenvalues of Ahat^(-1)A."""
    rng = np.random.default_rng(seed)
    for _ in range(probes):
        v = rng.standard_normal(prob.m)
        av = prob.A @ v
        # (v, Ahat^(-1) A v)_A / (v, v)_A samples the spectrum of Ahat^(-1)A
        q = float(av @ ahat_inv(av)) / float(v @ av)
        if q <= 1.0:
            raise ValueError(
                "block preconditioner is not strictly below A; decrease delta"
            )


def solve_bp_pcg(prob, delta=None, tol=DEFAULT_TOL, max_iter=5000, amg_cycles=2):
    """Conjugate gradients on the transformed SPD block system.

    The transformation multiplies the indefinite system on the left by
    [[A*Ahat^(-1)-I, 0], [B^T*Ahat^(-1), -I]]; with Ahat scaled strictly
    below A the result is SPD and PCG applies with the block-diagonal
    preconditioner diag(A - Ahat, lump(M)).  The code never inverts A - Ahat:
    the first-block residual always lies in its range, so its preconditioned
    image is tracked by the same recurrence as the residual itself.
    """
    ahat_inv, delta = _bp_ahat_inverse(prob, delta, amg_cycles)
    _check_ahat_below_a(prob, ahat_inv)
    A, B, M = prob.A, prob.B, prob.M
    m, n = prob.m, prob.n
    dinv = 1.0 / prob.D
    load = prob.load

    def true_state(x_p, x_y):
        # transformed residual and its preconditioned first block, rebuilt
        # from scratch: s_p is the first-row residual of the original system,
        # and r_p = (A - Ahat) Ahat^(-1) s_p lands in the range of (A - Ahat)
        # with preimage t = Ahat^(-1) s_p
        s_p = -(A @ x_p + B @ x_y)
        t = ahat_inv(s_p)
        r_p = A @ t - s_p
        r_y = load + B.T @ (t + x_p) - M @ x_y
        return r_p, r_y, t

    x_p = np.zeros(m)
    x_y = np.zeros(n)
    r_p = np.zeros(m)
    r_y = load.copy()
    t = np.zeros(m)  # preimage: r_p = (A - Ahat) t
    stats = SolveStats()
    rz = float(r_y @ (dinv * r_y))
    norm0 = np.sqrt(rz)
    stats.residual_history.append(norm0)
    replace_every = 40  # drift guard on the coupled recurrences
    if norm0 == 0.0:
        stats.converged = True
        stats.stop_reason = "converged"
    else:
        p_p = t.copy()
        p_y = dinv * r_y
        for k in range(1, max_iter + 1):
            u = A @ p_p + B @ p_y
            w = ahat_inv(u)
            q_p = A @ w - u  # = (A - Ahat) w
            q_y = B.T @ (w - p_p) + M @ p_y
            pq = float(p_p @ q_p + p_y @ q_y)
            if pq <= 0.0:
                stats.iterations = k - 1
                stats.stop_reason = "indefinite_operator"
                raise RuntimeError(
                    "BP-PCG lost positivity; the preconditioner scaling "
                    "violates Ahat < A"
                )
            alpha = rz / pq
            x_p += alpha * p_p
            x_y += alpha * p_y
            refreshed = False
            if k % replace_every == 0:
                r_p, r_y, t = true_state(x_p, x_y)
                refreshed = True
            else:
                r_p -= alpha * q_p
                r_y -= alpha * q_y
                t -= alpha * w
            z_y = dinv * r_y
            rz_new = float(r_p @ t + r_y @ z_y)
            if rz_new <= 0.0 and not refreshed:
                r_p, r_y, t = true_state(x_p, x_y)
                z_y = dinv * r_y
                rz_new = float(r_p @ t + r_y @ z_y)
                refreshed = True
            stats.iterations = k
            stats.residual_history.append(np.sqrt(max(rz_new, 0.0)))
            if np.sqrt(max(rz_new, 0.0)) <= tol * norm0:
                if not refreshed:
                    r_p, r_y, t = true_state(x_p, x_y)
                    z_y = dinv * r_y
                    rz_new = float(r_p @ t + r_y @ z_y)
                if np.sqrt(max(rz_new, 0.0)) <= tol * norm0:
                    stats.converged = True
                    stats.stop_reason = "converged"
                    break
            if rz_new <= 0.0:
                # true residual is at the round-off floor already
                stats.converged = True
                stats.stop_reason = "roundoff_floor"
                break
            beta = rz_new / rz
            rz = rz_new
            p_p = t + beta * p_p
            p_y = z_y + beta * p_y
        if not stats.converged:
            raise RuntimeError("BP-PCG failed: max_iter")
    stats.extra["delta"] = delta
    y_f, p_f, u_f = _wrap_fields(prob, x_y, x_p)
    return SolveResult(
        y=y_f, p=p_f, u=u_f, stats=stats, solver_id="bp_pcg",
        residual_adjoint=_adjoint_residual(prob, x_p, x_y, "explicit"),
        residual_state=_state_residual(prob, x_p, x_y),
    )


def solve_pgmres(prob, tol=DEFAULT_TOL, max_iter=5000, amg_cycles=2):
    """Left-preconditioned full GMRES on the positive definite block form.

    The system [[A, B], [-B^T, M]] (p, y) = (0, b_d) is preconditioned by
    diag(Ahat, lump(M)) with Ahat the lumped adjoint mass (L2) or the plain
    multigrid preconditioner with ``amg_cycles`` V-cycles (energy).
    """
    A, B, M = prob.A, prob.B, prob.M
    m, n = prob.m, prob.n
    dinv = 1.0 / prob.D
    if prob.regularization == "l2":
        dbar_inv = 1.0 / prob.Dbar

        def ahat_inv(v):
            return dbar_inv * v

    else:
        h = prob.amg_hierarchy()

        def ahat_inv(v):
            return amg_mod.vcycles(h, v, amg_cycles)

    def apply_op(v):
        p, y = v[:m], v[m:]
        return np.concatenate([A @ p + B @ y, -(B.T @ p) + M @ y])

    def apply_prec(v):
        return np.concatenate([ahat_inv(v[:m]), dinv * v[m:]])

    rhs = np.concatenate([np.zeros(m), prob.load])
    x, stats = gmres(apply_op, apply_prec, rhs, rel_tol=tol, max_iter=max_iter)
    if not stats.converged:
        raise RuntimeError(f"PGMRES failed: {stats.stop_reason}")
    x_p, x_y = x[:m], x[m:]
    y_f, p_f, u_f = _wrap_fields(prob, x_y, x_p)
    return SolveResult(
        y=y_f, p=p_f, u=u_f, stats=stats, solver_id="pgmres",
        residual_adjoint=_adjoint_residual(prob, x_p, x_y, "explicit"),
        residual_state=_state_residual(prob, x_p, x_y),
    )


def solve_dense(prob):
    """Dense direct solve of the indefinite block system (small problems)."""
    m, n = prob.m, prob.n
    K = np.zeros((m + n, m + n))
    K[:m, :m] = prob.A.toarray()
    K[:m, m:] = prob.B.toarray()
    K[m:, :m] = prob.B.T.toarray()
    K[m:, m:] = -prob.M.toarray()
    rhs = np.concatenate([np.zeros(m), -prob.load])
    sol = np.linalg.solve(K, rhs)
    return sol[:m], sol[m:]


def vertex_rho(prob):
    """Per-vertex regularization weight on the adjoint space.

    Constant fields broadcast; local fields average the adjacent elements.
    """
    mesh = prob.mesh
    if prob.rho.kind == "constant":
        return np.full(mesh.n_vertices, prob.rho.value)
    acc = np.zeros(mesh.n_vertices)
    cnt = np.zeros(mesh.n_vertices)
    for col in range(mesh.elements.shape[1]):
        np.add.at(acc, mesh.elements[:, col], prob.rho.rho_tau)
        np.add.at(cnt, mesh.elements[:, col], 1.0)
    return acc / np.maximum(cnt, 1.0)


def recover_control(prob, p_field):
    """Control from the gradient relation u = -rho^(-1) p (L2 case only)."""
    if prob.regularization != "l2":
        raise ValueError(
            "the energy-regularized control lives in a dual space; "
            "no nodal recovery is available"
        )
    rho_v = vertex_rho(prob)[prob.Ph.free_dofs]
    return NodalField(prob.Ph, -p_field.values / rho_v)
