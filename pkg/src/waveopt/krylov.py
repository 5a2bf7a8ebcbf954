"""Krylov solvers: PCG, full GMRES with left preconditioning, and a Lanczos
estimator for extreme generalized eigenvalues.

Operators and preconditioners are passed as anything accepted by
:func:`as_apply`: a sparse/dense matrix, a 1-D array (diagonal), a callable
``v -> Av``, or ``None`` for the identity.  All solvers stop on the norm
``sqrt((preconditioned residual, residual))`` relative to its initial value,
which for PCG is the natural quantity ``sqrt(r.z)`` tracked anyway.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "SolveStats",
    "EigenEstimate",
    "as_apply",
    "pcg",
    "gmres",
    "lanczos_extreme_eigs",
]


@dataclass
class SolveStats:
    iterations: int = 0
    residual_history: list = field(default_factory=list)
    converged: bool = False
    stop_reason: str = "max_iter"
    extra: dict = field(default_factory=dict)


@dataclass
class EigenEstimate:
    lam_min: float
    lam_max: float
    residual_min: float
    residual_max: float
    iterations: int
    converged: bool


def as_apply(op):
    """Normalize an operator-ish object to a ``v -> op @ v`` callable."""
    if op is None:
        return lambda v: v
    if isinstance(op, np.ndarray) and op.ndim == 1:
        diag = op
        return lambda v: diag * v
    if callable(op) and not sp.issparse(op) and not isinstance(op, np.ndarray):
        return op
    mat = op
    return lambda v: mat @ v


def check_linearity(apply_op, n, rng=None, probes=3, tol=1e-10):
    """Spot-check ||A(au+v) - aAu - Av|| <= tol relative on random probes."""
    rng = np.random.default_rng(0) if rng is None else rng
    for _ in range(probes):
        u = rng.standard_normal(n)
        v = rng.standard_normal(n)
        a = rng.standard_normal()
        lhs = apply_op(a * u + v)
        rhs = a * apply_op(u) + apply_op(v)
        scale = np.linalg.norm(rhs) + 1e-300
        if np.linalg.norm(lhs - rhs) > tol * scale:
            return False
    return True


def pcg(op, precond, rhs, x0=None, rel_tol=1e-11, max_iter=5000):
    """Preconditioned conjugate gradients.

    Stops once sqrt(r.z) falls below rel_tol times its initial value, where
    z is the preconditioned residual.  Returns (x, SolveStats).
    """
    if not 0.0 < rel_tol < 1.0:
        raise ValueError("rel_tol must lie in (0, 1)")
    apply_op = as_apply(op)
    apply_prec = as_apply(precond)
    b = np.asarray(rhs, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - apply_op(x) if x.any() else b.copy()
    z = apply_prec(r)
    rz = float(r @ z)
    stats = SolveStats()
    norm0 = np.sqrt(max(rz, 0.0))
    stats.residual_history.append(norm0)
    if rz < 0:
        stats.stop_reason = "indefinite_preconditioner"
        return x, stats
    if norm0 == 0.0:
        stats.converged = True
        stats.stop_reason = "converged"
        return x, stats
    p = z.copy()
    tol_abs = rel_tol * norm0
    for k in range(1, max_iter + 1):
        Ap = apply_op(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            stats.iterations = k - 1
            stats.stop_reason = "indefinite_operator"
            return x, stats
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = apply_prec(r)
        rz_new = float(r @ z)
        stats.iterations = k
        stats.residual_history.append(np.sqrt(max(rz_new, 0.0)))
        if np.sqrt(max(rz_new, 0.0)) <= tol_abs:
            stats.converged = True
            stats.stop_reason = "converged"
            return x, stats
        beta = rz_new / rz
        rz = rz_new
        p = z + beta * p
    stats.stop_reason = "max_iter"
    return x, stats


def gmres(op, precond, rhs, rel_tol=1e-11, max_iter=5000, x0=None,
          literal_norm_check=True):
    """Full (unrestarted) GMRES on the left-preconditioned system.

    The Arnoldi recurrence tracks the 2-norm of the preconditioned residual
    (free per iteration).  On top of that, the stopping rule evaluates the
    literal norm sqrt((preconditioned residual, residual)) whenever the cheap
    norm has met the target, so the reported convergence is in the same norm
    the PCG solvers use; both histories end up in ``stats``.
    """
    if not 0.0 < rel_tol < 1.0:
        raise ValueError("rel_tol must lie in (0, 1)")
    apply_op = as_apply(op)
    apply_prec = as_apply(precond)
    b = np.asarray(rhs, dtype=float)
    n = b.shape[0]
    x0 = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r0 = b - apply_op(x0) if x0.any() else b.copy()
    z0 = apply_prec(r0)
    stats = SolveStats()
    lit0 = np.sqrt(max(float(z0 @ r0), 0.0))
    beta = np.linalg.norm(z0)
    stats.residual_history.append(beta)
    stats.extra["literal_norm0"] = lit0
    if beta == 0.0:
        stats.converged = True
        stats.stop_reason = "converged"
        return x0, stats

    max_iter = min(max_iter, n)
    cap = min(max_iter, 64)
    V = np.empty((cap + 1, n))
    V[0] = z0 / beta
    H = np.zeros((cap + 1, cap))
    cs = np.zeros(max_iter)
    sn = np.zeros(max_iter)
    g = np.zeros(max_iter + 1)
    g[0] = beta

    def ensure_capacity(k):
        # grow the Krylov basis and Hessenberg storage geometrically
        nonlocal V, H, cap
        if k + 1 > cap:
            cap = min(max_iter, max(2 * cap, k + 1))
            grown = np.empty((cap + 1, n))
            grown[: V.shape[0]] = V
            V = grown
            hess = np.zeros((cap + 1, cap))
            hess[: H.shape[0], : H.shape[1]] = H
            H = hess

    def solution(k):
        y = np.zeros(k)
        for i in range(k - 1, -1, -1):
            y[i] = (g[i] - H[i, i + 1 : k] @ y[i + 1 : k]) / H[i, i]
        return x0 + y @ V[:k]

    k = 0
    while k < max_iter:
        ensure_capacity(k + 1)
        w = apply_prec(apply_op(V[k]))
        # classical Gram-Schmidt, applied twice (stable and BLAS-friendly)
        h = V[: k + 1] @ w
        w -= h @ V[: k + 1]
        h2 = V[: k + 1] @ w
        w -= h2 @ V[: k + 1]
        h += h2
        hk1 = np.linalg.norm(w)
        H[: k + 1, k] = h
        H[k + 1, k] = hk1
        for i in range(k):
            tmp = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
            H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
            H[i, k] = tmp
        denom = np.hypot(H[k, k], H[k + 1, k])
        cs[k], sn[k] = H[k, k] / denom, H[k + 1, k] / denom
        H[k, k] = denom
        H[k + 1, k] = 0.0
        g[k + 1] = -sn[k] * g[k]
        g[k] = cs[k] * g[k]
        k += 1
        res = abs(g[k])
        stats.residual_history.append(res)
        happy = hk1 <= 1e-14 * beta
        if happy or res <= rel_tol * beta:
            x = solution(k)
            if literal_norm_check and lit0 > 0.0 and not happy and k < max_iter:
                r = b - apply_op(x)
                lit = np.sqrt(max(float(apply_prec(r) @ r), 0.0))
                stats.extra["literal_norm"] = lit
                if lit > rel_tol * lit0:
                    V[k] = w / hk1
                    continue
            stats.iterations = k
            stats.converged = True
            stats.stop_reason = "happy_breakdown" if happy else "converged"
            return x, stats
        V[k] = w / hk1
    stats.iterations = k
    stats.stop_reason = "max_iter"
    return solution(k), stats


def lanczos_extreme_eigs(op_a, diag_b, iters=100, seed=0):
    """Extreme eigenvalues of the pencil (A, B) with B diagonal SPD.

    Runs symmetric Lanczos with full reorthogonalization on
    B^(-1/2) A B^(-1/2); Ritz residual bounds come with the estimates.
    """
    apply_a = as_apply(op_a)
    d = np.asarray(diag_b, dtype=float)
    if (d <= 0).any():
        raise ValueError("B must be positive diagonal")
    s = np.sqrt(d)
    n = d.shape[0]
    iters = min(iters, n)
    rng = np.random.default_rng(seed)
    V = np.empty((iters + 1, n))
    alpha = np.zeros(iters)
    beta = np.zeros(iters + 1)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    V[0] = v
    converged = False
    m = iters
    for k in range(iters):
        w = apply_a(V[k] / s) / s
        a = float(V[k] @ w)
        alpha[k] = a
        w -= a * V[k]
        if k > 0:
            w -= beta[k] * V[k - 1]
        # full reorthogonalization
        w -= (V[: k + 1] @ w) @ V[: k + 1]
        w -= (V[: k + 1] @ w) @ V[: k + 1]
        nb = np.linalg.norm(w)
        beta[k + 1] = nb
        if nb < 1e-13 * max(abs(alpha[: k + 1]).max(), 1.0):
            m = k + 1
            converged = True
            break
        V[k + 1] = w / nb
    T = np.diag(alpha[:m]) + np.diag(beta[1:m], 1) + np.diag(beta[1:m], -1)
    evals, evecs = np.linalg.eigh(T)
    res_lo = 0.0 if converged else abs(beta[m] * evecs[-1, 0])
    res_hi = 0.0 if converged else abs(beta[m] * evecs[-1, -1])
    return EigenEstimate(
        lam_min=float(evals[0]),
        lam_max=float(evals[-1]),
        residual_min=float(res_lo),
        residual_max=float(res_hi),
        iterations=m,
        converged=converged,
    )
