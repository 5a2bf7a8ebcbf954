"""Finite element matrix and load assembly with exact P1 local integration.

All P1xP1 matrix terms use closed-form local formulas (gradients are
piecewise constant, hat-product integrals are analytic), so the matrices
carry no quadrature error.  Load vectors integrate the target by a per-class
quadrature policy, see :func:`waveopt.quadrature.rule_for_class`.

Assembled matrices are reduced: Dirichlet vertices are eliminated and never
appear as rows/columns.  Summation goes through coo->csr with sorted indices,
making element contributions add in a fixed order (bitwise reproducible).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp

from .quadrature import rule_for_class

__all__ = [
    "RegularizationField",
    "assemble_wave",
    "assemble_mass",
    "assemble_spacetime_stiffness",
    "assemble_target_load",
    "lump",
    "export_matrix_market",
]

_LOAD_CHUNK = 200_000  # elements per quadrature batch (memory guard)


@dataclass(frozen=True)
class RegularizationField:
    """Per-element regularization weight rho_tau > 0.

    ``constant`` holds one value everywhere; ``local`` couples the weight to
    the element size as h_tau**exponent (exponent 4 for L2 regularization,
    2 for energy regularization).
    """

    kind: str  # 'constant' | 'local'
    rho_tau: np.ndarray
    value: float | None = None
    exponent: int | None = None

    def __post_init__(self):
        if not (self.rho_tau > 0).all():
            raise ValueError("regularization weights must be positive")
        self.rho_tau.flags.writeable = False

    @classmethod
    def constant(cls, value, mesh):
        if value <= 0:
            raise ValueError("regularization parameter must be positive")
        return cls("constant", np.full(mesh.n_elements, float(value)), value=float(value))

    @classmethod
    def local(cls, exponent, mesh):
        return cls("local", mesh.element_sizes() ** exponent, exponent=int(exponent))


def _geometry(mesh):
    """Volumes and P1 shape gradients, shapes (ne,), (ne, d+2, d+1)."""
    cache = mesh._cache
    if "p1_grads" not in cache:
        coords = mesh.element_coords()
        edges = coords[:, 1:, :] - coords[:, :1, :]  # rows v_i - v_0
        inv = np.linalg.inv(edges)
        grads = np.empty_like(coords)
        grads[:, 1:, :] = np.transpose(inv, (0, 2, 1))
        grads[:, 0, :] = -grads[:, 1:, :].sum(axis=1)
        cache["p1_grads"] = grads
    return mesh.volumes(), cache["p1_grads"]


def _scatter(local, rows_space, cols_space):
    """Reduce local (ne, a, b) blocks to a CSR matrix on the free dofs."""
    mesh = rows_space.mesh
    n1 = mesh.simplex_dim + 1
    rdof = rows_space.vertex_to_dof[mesh.elements]  # (ne, n1)
    cdof = cols_space.vertex_to_dof[mesh.elements]
    rows = np.broadcast_to(rdof[:, :, None], local.shape)
    cols = np.broadcast_to(cdof[:, None, :], local.shape)
    keep = (rows >= 0) & (cols >= 0)
    mat = sp.coo_matrix(
        (local[keep], (rows[keep], cols[keep])),
        shape=(rows_space.n_dofs, cols_space.n_dofs),
    )
    out = mat.tocsr()
    out.sum_duplicates()
    return out


def _check_same_mesh(a, b):
    if a.mesh is not b.mesh:
        raise ValueError("spaces live on different meshes")


def assemble_wave(Yh, Ph):
    """Wave matrix B[j,k] = -(dt phi_k, dt psi_j) + (grad_x phi_k, grad_x psi_j).

    Rows run over the adjoint space, columns over the state space.
    """
    _check_same_mesh(Yh, Ph)
    mesh = Yh.mesh
    d = mesh.dim_d
    vol, grads = _geometry(mesh)
    gx = grads[:, :, :d]
    gt = grads[:, :, d]
    local = np.einsum("eak,ebk->eab", gx, gx) - gt[:, :, None] * gt[:, None, :]
    local *= vol[:, None, None]
    return _scatter(local, Ph, Yh)


def assemble_mass(space, weight=None, inverse_weight=False):
    """Mass matrix with optional per-element factor (or its inverse).

    The local block is |tau| * (1 + delta_ab) / ((n+1)(n+2)) with n = d+1.
    """
    mesh = space.mesh
    n = mesh.simplex_dim
    vol = mesh.volumes()
    scale = vol / ((n + 1) * (n + 2))
    if weight is not None:
        w = weight.rho_tau
        scale = scale / w if inverse_weight else scale * w
    base = np.ones((n + 1, n + 1)) + np.eye(n + 1)
    local = scale[:, None, None] * base[None, :, :]
    return _scatter(local, space, space)


def assemble_spacetime_stiffness(space, weight=None, inverse_weight=False):
    """Stiffness with the full space-time gradient (grad_x, dt)."""
    mesh = space.mesh
    vol, grads = _geometry(mesh)
    scale = vol.copy()
    if weight is not None:
        w = weight.rho_tau
        scale = scale / w if inverse_weight else scale * w
    local = np.einsum("eak,ebk->eab", grads, grads) * scale[:, None, None]
    return _scatter(local, space, space)


def lump(mass):
    """Row-sum lumping; returns the diagonal as a vector."""
    diag = np.asarray(mass.sum(axis=1)).ravel()
    if (diag < 0).any():
        raise ValueError("negative row sum: input is not a mass-type matrix")
    return diag


def assemble_target_load(space, target):
    """Load vector with entries integral of y_d * phi_l over Q."""
    mesh = space.mesh
    n = mesh.simplex_dim
    bary, w = rule_for_class(target.smoothness_class, n)
    vol = mesh.volumes()
    coords = mesh.element_coords()
    dofs = space.vertex_to_dof[mesh.elements]
    out = np.zeros(space.n_dofs)
    for start in range(0, mesh.n_elements, _LOAD_CHUNK):
        sl = slice(start, min(start + _LOAD_CHUNK, mesh.n_elements))
        pts = np.einsum("qa,eac->eqc", bary, coords[sl])
        fv = target.eval(pts)
        if not np.isfinite(fv).all():
            raise ValueError("target returned non-finite values during quadrature")
        contrib = np.einsum("q,eq,qa->ea", w, fv, bary) * vol[sl, None]
        dsl = dofs[sl]
        keep = dsl >= 0
        np.add.at(out, dsl[keep], contrib[keep])
    return out


def export_matrix_market(path, matrix):
    """Matrix-market export of an assembled sparse matrix."""
    scipy.io.mmwrite(path, sp.coo_matrix(matrix))
