"""Continuous P1 spaces on the space-time mesh with essential boundary masks.

Two trial/test spaces appear throughout:

* state space (kind ``"state"``): zero on the lateral boundary and at t=0,
* adjoint space (kind ``"adjoint"``): zero on the lateral boundary and at t=1.

Dirichlet vertices are eliminated: assembled systems act on the free dofs
only, ordered by ascending vertex id.  ``kind="free"`` keeps every vertex and
exists for diagnostics (partition-of-unity checks and the like).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh

__all__ = ["DofSpace", "NodalField", "build_space", "interpolate", "prolongate"]

KINDS = ("state", "adjoint", "free")


@dataclass(frozen=True, eq=False)
class DofSpace:
    mesh: Mesh
    kind: str
    dirichlet_mask: np.ndarray  # (nv,) bool, True = constrained to zero
    free_dofs: np.ndarray  # (n_dofs,) vertex ids, ascending
    vertex_to_dof: np.ndarray  # (nv,) dof id or -1

    def __post_init__(self):
        for arr in (self.dirichlet_mask, self.free_dofs, self.vertex_to_dof):
            arr.flags.writeable = False

    @property
    def n_dofs(self):
        return self.free_dofs.shape[0]


@dataclass
class NodalField:
    space: DofSpace
    values: np.ndarray  # (n_dofs,) coefficients on the free vertices

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.space.n_dofs,):
            raise ValueError(
                f"field has {self.values.shape} values for {self.space.n_dofs} dofs"
            )

    def vertex_values(self):
        """Values on every mesh vertex, zero on the masked ones."""
        out = np.zeros(self.space.mesh.n_vertices)
        out[self.free_dofs] = self.values
        return out

    @property
    def free_dofs(self):
        return self.space.free_dofs


def build_space(mesh, kind):
    if kind not in KINDS:
        raise ValueError(f"unknown space kind {kind!r}; expected one of {KINDS}")
    lateral = mesh.on_lateral()
    if kind == "state":
        mask = lateral | mesh.on_bottom()
    elif kind == "adjoint":
        mask = lateral | mesh.on_top()
    else:
        mask = np.zeros(mesh.n_vertices, dtype=bool)
    free = np.flatnonzero(~mask).astype(np.int64)
    if kind != "free" and free.size == mesh.n_vertices:
        raise ValueError("essential boundary mask is empty; mesh is not tagged")
    v2d = np.full(mesh.n_vertices, -1, dtype=np.int64)
    v2d[free] = np.arange(free.size)
    return DofSpace(mesh=mesh, kind=kind, dirichlet_mask=mask,
                    free_dofs=free, vertex_to_dof=v2d)


def interpolate(func, space):
    """Nodal interpolation at the free vertices; masked vertices stay zero."""
    pts = space.mesh.vertices[space.free_dofs]
    values = np.asarray(func(pts), dtype=float)
    if values.shape != (space.n_dofs,):
        raise ValueError("function must return one value per evaluation point")
    if not np.isfinite(values).all():
        raise ValueError("non-finite sample in nodal interpolation")
    return NodalField(space, values)


def _mesh_chain(coarse_mesh, fine_mesh):
    chain = [fine_mesh]
    m = fine_mesh
    while m is not coarse_mesh:
        m = m.parent
        if m is None:
            raise ValueError("fine mesh is not a refinement descendant of the coarse mesh")
        chain.append(m)
    chain.reverse()
    return chain


def prolongate(coarse, fine_space):
    """Piecewise-linear transfer of a coarse field onto a finer nested mesh.

    Every refinement vertex is the midpoint of a recorded parent edge, so the
    P1 extension evaluates as a cascade of endpoint averages; coarse vertices
    carry over exactly.
    """
    chain = _mesh_chain(coarse.space.mesh, fine_space.mesh)
    values = coarse.vertex_values()
    for mesh in chain[1:]:
        prev_nv = values.shape[0]
        new = np.zeros(mesh.n_vertices)
        new[:prev_nv] = values
        parents = mesh.vertex_parents
        done = prev_nv
        while done < mesh.n_vertices:
            # parents always precede the child id, so a maximal prefix whose
            # parents are already resolved is never empty
            pm = np.maximum(parents[done:, 0], parents[done:, 1])
            can = pm < done
            k = int(can.size if can.all() else np.argmin(can))
            ids = np.arange(done, done + k)
            new[ids] = 0.5 * (new[parents[ids, 0]] + new[parents[ids, 1]])
            done += k
        values = new
    return NodalField(fine_space, values[fine_space.free_dofs])
