"""Classical Ruge-Stueben algebraic multigrid for the SPD weighted space-time
Laplacian, exposed as a fixed linear map "apply i V-cycles from zero".

Coarsening (strength of connection, two-pass C/F splitting, direct
interpolation) is delegated to pyamg level by level; Galerkin coarse
operators are re-assembled here as P.T @ A @ P so the hierarchy invariant is
exact by construction.  Smoothing is symmetric Gauss-Seidel with equal pre-
and post-counts, which makes the V-cycle-from-zero map symmetric positive
definite and its error propagation operator E self-adjoint and non-negative
in the energy inner product -- the property the scaled block preconditioner
delta*(1-eta^i)*K*(I-E^i)^(-1) relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from pyamg.classical import ruge_stuben_solver
from pyamg.relaxation.relaxation import gauss_seidel

__all__ = [
    "AmgConfig",
    "AmgHierarchy",
    "setup",
    "vcycles",
    "estimate_contraction",
    "as_bp_block_preconditioner",
]


@dataclass(frozen=True)
class AmgConfig:
    strength_threshold: float = 0.25
    pre_smooth: int = 2
    post_smooth: int = 2
    cycles_per_apply: int = 2
    max_coarse_size: int = 64
    symmetric_smoothing: bool = True

    def __post_init__(self):
        if self.pre_smooth != self.post_smooth:
            raise ValueError("pre/post smoothing counts must match inside PCG")
        if not self.symmetric_smoothing:
            raise ValueError("only symmetric Gauss-Seidel smoothing is supported")


@dataclass
class AmgHierarchy:
    config: AmgConfig
    operators: list  # csr per level, finest first
    prolongations: list  # csr, one fewer than operators
    coarse_factor: tuple  # lu_factor of the coarsest operator
    eta: float | None = None  # measured contraction, set by estimate_contraction
    _work: dict = field(default_factory=dict, repr=False)

    @property
    def n_levels(self):
        return len(self.operators)

    @property
    def n(self):
        return self.operators[0].shape[0]

    def stats_text(self):
        """Level table plus operator complexity, for diagnostics dumps."""
        lines = ["level       n        nnz"]
        nnz0 = self.operators[0].nnz
        total = 0
        for i, A in enumerate(self.operators):
            total += A.nnz
            lines.append(f"{i:5d} {A.shape[0]:8d} {A.nnz:10d}")
        lines.append(f"operator complexity {total / nnz0:.3f}")
        if self.eta is not None:
            lines.append(f"measured contraction eta {self.eta:.4f}")
        return "\n".join(lines)


def setup(matrix, config=None):
    """Build the multigrid hierarchy for an SPD M-matrix-like input."""
    config = config or AmgConfig()
    A = sp.csr_matrix(matrix).astype(float)
    if A.shape[0] != A.shape[1]:
        raise ValueError("AMG setup needs a square matrix")
    operators = [A]
    prolongations = []
    while operators[-1].shape[0] > config.max_coarse_size:
        Af = operators[-1]
        ml = ruge_stuben_solver(
            Af,
            strength=("classical", {"theta": config.strength_threshold}),
            CF=("RS", {"second_pass": True}),
            interpolation="direct",
            max_levels=2,
            max_coarse=config.max_coarse_size,
        )
        if len(ml.levels) < 2:
            break
        P = sp.csr_matrix(ml.levels[0].P)
        if P.shape[1] >= Af.shape[0]:
            break  # no coarsening progress
        Ac = sp.csr_matrix(P.T @ Af @ P)
        Ac.sum_duplicates()
        operators.append(Ac)
        prolongations.append(P)
    coarse = operators[-1].toarray()
    try:
        factor = scipy.linalg.lu_factor(coarse)
    except scipy.linalg.LinAlgError as exc:  # pragma: no cover
        raise ValueError("singular coarsest-level matrix") from exc
    if not np.isfinite(factor[0]).all() or (np.abs(np.diag(factor[0])) < 1e-300).any():
        raise ValueError("singular coarsest-level matrix")
    return AmgHierarchy(config=config, operators=operators,
                        prolongations=prolongations, coarse_factor=factor)


def _vcycle(h, level, b, x):
    A = h.operators[level]
    if level == h.n_levels - 1:
        return scipy.linalg.lu_solve(h.coarse_factor, b)
    gauss_seidel(A, x, b, iterations=h.config.pre_smooth, sweep="symmetric")
    r = b - A @ x
    P = h.prolongations[level]
    e = _vcycle(h, level + 1, P.T @ r, np.zeros(P.shape[1]))
    x += P @ e
    gauss_seidel(A, x, b, iterations=h.config.post_smooth, sweep="symmetric")
    return x


def vcycles(h, rhs, count=1):
    """Apply `count` V-cycles from the zero initial guess.

    As a map rhs -> result this realizes (I - E^count) A^(-1): a fixed,
    linear, symmetric positive definite approximation of A^(-1).
    """
    b = np.asarray(rhs, dtype=float)
    x = np.zeros_like(b)
    for _ in range(count):
        x = _vcycle(h, 0, b, x)
    return x


def estimate_contraction(h, probes=40, seed=7):
    """Power iteration for eta = ||E||_A, E = I - C A the V-cycle error map.

    E is self-adjoint and non-negative in the A-inner product, so the
    A-norm Rayleigh quotient of the iterates increases to the extreme
    eigenvalue.  The estimate is stored on the hierarchy and returned.
    """
    A = h.operators[0]
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(h.n)
    eta = 0.0
    for _ in range(probes):
        # E v = v - vcycle(A v)
        w = v - vcycles(h, A @ v, 1)
        num = float(w @ (A @ w))
        den = float(v @ (A @ v))
        if den <= 0:
            raise ValueError("operator is not positive definite")
        # Rayleigh quotient of E in the A-inner product: (Ev, v)_A/(v, v)_A
        eta = float(w @ (A @ v)) / den
        norm = np.sqrt(max(num, 0.0))
        if norm == 0.0:
            eta = 0.0
            break
        v = w / norm
    h.eta = max(eta, 0.0)
    return h.eta


def as_bp_block_preconditioner(h, delta, i=None, eta=None):
    """Scaled AMG block preconditioner delta*(1-eta^i)*A*(I-E^i)^(-1).

    Returns a callable applying the preconditioner INVERSE, i.e.
    r -> (delta*(1-eta^i))^(-1) * (i V-cycles from zero on r).  With
    delta < 1 and eta a true contraction bound this guarantees Ahat < A.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie strictly inside (0, 1)")
    i = h.config.cycles_per_apply if i is None else int(i)
    if eta is None:
        eta = h.eta if h.eta is not None else estimate_contraction(h)
    if not 0.0 <= eta < 1.0:
        raise ValueError("eta must lie in [0, 1)")
    scale = 1.0 / (delta * (1.0 - eta**i))

    def apply_inverse(r):
        return scale * vcycles(h, r, i)

    apply_inverse.scale = scale
    apply_inverse.cycles = i
    apply_inverse.eta = eta
    return apply_inverse
