"""Simplicial space-time meshes of the unit cylinder Q = (0,1)^d x (0,1).

The mesh is stored struct-of-arrays style: vertex coordinates are ordered as
(x_1, ..., x_d, t).  Element vertex lists follow the monotone Kuhn-path order
of the initial triangulation, which is what the tagged-edge bisection of
:func:`refine_adaptive` relies on, so their order must not be permuted.

Meshes are immutable after construction; refinement returns a new mesh that
keeps a reference to its parent plus, for every new vertex, the pair of
endpoint ids of the edge it bisected.  This lineage drives piecewise-linear
prolongation between nested meshes.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from itertools import combinations, permutations
from math import factorial

import numpy as np

__all__ = [
    "BoundaryTag",
    "Mesh",
    "MeshConformityError",
    "build_initial_mesh",
    "refine_uniform",
    "refine_adaptive",
    "element_size_field",
    "boundary_facets",
    "write_vtk",
    "save_mesh",
    "load_mesh",
]

GEOM_TOL = 1e-12

SNAPSHOT_MAGIC = b"WOMESH01"


class BoundaryTag:
    """Facet classification on the boundary of the unit cylinder."""

    INTERIOR = 0
    LATERAL = 1  # x_i in {0, 1}
    BOTTOM = 2  # t = 0
    TOP = 3  # t = 1


class MeshConformityError(RuntimeError):
    """Raised when refinement closure fails to terminate or conformity breaks."""


@dataclass(frozen=True, eq=False)
class Mesh:
    dim_d: int
    vertices: np.ndarray  # (nv, d+1), columns x_1..x_d, t
    elements: np.ndarray  # (ne, d+2) vertex ids, bisection order preserved
    tags: np.ndarray  # (ne,) Maubach bisection tag in 1..d+1
    generation: np.ndarray  # (ne,) refinement depth per element
    vertex_parents: np.ndarray  # (nv, 2); (i, i) for non-midpoint vertices
    parent: "Mesh | None" = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for arr in (self.vertices, self.elements, self.tags, self.generation,
                    self.vertex_parents):
            arr.flags.writeable = False

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    @property
    def simplex_dim(self):
        return self.dim_d + 1

    def element_coords(self):
        """Vertex coordinates per element, shape (ne, d+2, d+1)."""
        return self.vertices[self.elements]

    def volumes(self):
        if "volumes" not in self._cache:
            n = self.simplex_dim
            coords = self.element_coords()
            edges = coords[:, 1:, :] - coords[:, :1, :]
            self._cache["volumes"] = np.abs(np.linalg.det(edges)) / factorial(n)
        return self._cache["volumes"]

    def element_sizes(self):
        """h_tau = |tau|^(1/(d+1)) per element."""
        if "sizes" not in self._cache:
            self._cache["sizes"] = self.volumes() ** (1.0 / self.simplex_dim)
        return self._cache["sizes"]

    def edge_codes(self):
        """Sorted (a, b) codes of all element edges, shape (ne, n_edges)."""
        n1 = self.simplex_dim + 1
        pairs = list(combinations(range(n1), 2))
        a = self.elements[:, [p[0] for p in pairs]]
        b = self.elements[:, [p[1] for p in pairs]]
        lo = np.minimum(a, b).astype(np.int64)
        hi = np.maximum(a, b).astype(np.int64)
        return lo * np.int64(self.n_vertices + 1) + hi

    def checksum(self):
        """Stable digest of the mesh geometry and topology."""
        h = hashlib.sha256()
        h.update(struct.pack("<qqq", self.dim_d, self.n_vertices, self.n_elements))
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.elements.astype(np.int64)).tobytes())
        return h.hexdigest()

    # vertex predicates used for boundary masks and facet tagging
    def on_lateral(self):
        x = self.vertices[:, : self.dim_d]
        return ((x <= GEOM_TOL) | (x >= 1.0 - GEOM_TOL)).any(axis=1)

    def on_bottom(self):
        return self.vertices[:, -1] <= GEOM_TOL

    def on_top(self):
        return self.vertices[:, -1] >= 1.0 - GEOM_TOL


def build_initial_mesh(d, n_per_axis):
    """Kuhn triangulation of an (n_per_axis-1)^(d+1) grid on the unit cylinder.

    Every grid cell is split into (d+1)! simplices sharing the cell's main
    diagonal: 2 triangles for d=1, 6 tetrahedra for d=2 (so a 4x4x4 grid of
    cubes yields 384 tetrahedra on 125 vertices).
    """
    if d not in (1, 2):
        raise ValueError(f"unsupported spatial dimension d={d}; expected 1 or 2")
    if n_per_axis < 2:
        raise ValueError("n_per_axis must be at least 2")
    n = d + 1
    m = n_per_axis - 1
    axes = [np.linspace(0.0, 1.0, n_per_axis)] * n
    grids = np.meshgrid(*axes, indexing="ij")
    # vertex id = i_0 + i_1*(m+1) + ... with axis 0 fastest
    vertices = np.stack([g.reshape(-1, order="F") for g in grids], axis=1)

    strides = np.array([(m + 1) ** k for k in range(n)], dtype=np.int64)
    base_idx = np.meshgrid(*[np.arange(m)] * n, indexing="ij")
    base = sum(b.reshape(-1, order="F") * s for b, s in zip(base_idx, strides))

    cells = []
    for perm in permutations(range(n)):
        walk = np.zeros(n + 1, dtype=np.int64)
        offset = np.int64(0)
        for step, axis in enumerate(perm):
            offset += strides[axis]
            walk[step + 1] = offset
        cells.append(base[:, None] + walk[None, :])
    elements = np.vstack(cells)
    ne = elements.shape[0]
    nv = vertices.shape[0]
    return Mesh(
        dim_d=d,
        vertices=vertices,
        elements=elements,
        tags=np.full(ne, n, dtype=np.int64),
        generation=np.zeros(ne, dtype=np.int64),
        vertex_parents=np.stack([np.arange(nv)] * 2, axis=1).astype(np.int64),
    )


def _unique_edge_midpoints(mesh):
    """Create the midpoint vertex of every element edge (red refinement)."""
    codes = mesh.edge_codes()
    flat, inv = np.unique(codes.ravel(), return_inverse=True)
    stride = np.int64(mesh.n_vertices + 1)
    lo = (flat // stride).astype(np.int64)
    hi = (flat % stride).astype(np.int64)
    mids = 0.5 * (mesh.vertices[lo] + mesh.vertices[hi])
    mid_ids = mesh.n_vertices + np.arange(flat.size, dtype=np.int64)
    vertices = np.vstack([mesh.vertices, mids])
    parents = np.vstack([mesh.vertex_parents, np.stack([lo, hi], axis=1)])
    per_elem = mid_ids[inv].reshape(codes.shape)
    return vertices, parents, per_elem


# child vertex patterns for red refinement; 'm(i,j)' denotes the midpoint
# column index of edge (i, j) in the order produced by combinations()
_TRI_EDGES = list(combinations(range(3), 2))  # 01, 02, 12
_TET_EDGES = list(combinations(range(4), 2))  # 01, 02, 03, 12, 13, 23


def refine_uniform(mesh):
    """Red refinement: each triangle into 4, each tetrahedron into 8 (Bey)."""
    vertices, parents, mid = _unique_edge_midpoints(mesh)
    e = mesh.elements
    if mesh.dim_d == 1:
        m01, m02, m12 = mid[:, 0], mid[:, 1], mid[:, 2]
        children = [
            (e[:, 0], m01, m02),
            (m01, e[:, 1], m12),
            (m02, m12, e[:, 2]),
            (m01, m12, m02),
        ]
    else:
        m01, m02, m03, m12, m13, m23 = (mid[:, k] for k in range(6))
        children = [
            (e[:, 0], m01, m02, m03),
            (m01, e[:, 1], m12, m13),
            (m02, m12, e[:, 2], m23),
            (m03, m13, m23, e[:, 3]),
            (m01, m02, m03, m13),
            (m01, m02, m12, m13),
            (m02, m03, m13, m23),
            (m02, m12, m13, m23),
        ]
    elements = np.vstack([np.stack(ch, axis=1) for ch in children])
    reps = len(children)
    n = mesh.simplex_dim
    return Mesh(
        dim_d=mesh.dim_d,
        vertices=vertices,
        elements=elements,
        tags=np.full(elements.shape[0], n, dtype=np.int64),
        generation=np.tile(mesh.generation + 1, reps),
        vertex_parents=parents,
        parent=mesh,
    )


def _bisect(elements, tags, generation, select, vertices_list, parents_list,
            split_map, nv_hint):
    """Bisect the selected elements once along their tagged edge.

    Returns the replacement element/tag/generation arrays.  New midpoints are
    appended to vertices_list/parents_list and recorded in split_map.
    """
    n = elements.shape[1] - 1
    keep = elements[~select], tags[~select], generation[~select]
    sel_e = elements[select]
    sel_t = tags[select]
    sel_g = generation[select]

    # allocate midpoints for the bisection edges (vertex 0, vertex tag)
    a = sel_e[:, 0]
    b = sel_e[np.arange(sel_e.shape[0]), sel_t]
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    mids = np.empty(sel_e.shape[0], dtype=np.int64)
    for i, key in enumerate(zip(lo.tolist(), hi.tolist())):
        vid = split_map.get(key)
        if vid is None:
            vid = nv_hint + len(vertices_list)
            split_map[key] = vid
            vertices_list.append(key)
            parents_list.append(key)
        mids[i] = vid

    out_e = [keep[0]]
    out_t = [keep[1]]
    out_g = [keep[2]]
    for k in range(1, n + 1):
        grp = sel_t == k
        if not grp.any():
            continue
        ge, gm, gg = sel_e[grp], mids[grp], sel_g[grp]
        cols = list(range(n + 1))
        # child 1 replaces vertex k by the midpoint
        c1 = ge[:, cols].copy()
        c1[:, k] = gm
        # child 2 drops vertex 0 and inserts the midpoint after position k
        c2 = np.concatenate(
            [ge[:, 1 : k + 1], gm[:, None], ge[:, k + 1 :]], axis=1
        )
        child_tag = k - 1 if k > 1 else n
        for c in (c1, c2):
            out_e.append(c)
            out_t.append(np.full(c.shape[0], child_tag, dtype=np.int64))
            out_g.append(gg + 1)
    return np.vstack(out_e), np.concatenate(out_t), np.concatenate(out_g)


def refine_adaptive(mesh, marked, max_sweeps=64):
    """Bisect every marked element, then close the mesh back to conformity.

    Elements carry the tagged-edge bisection state in their vertex order; the
    closure loop keeps bisecting any element that still owns a split edge.
    Raises :class:`MeshConformityError` when the sweep budget is exhausted,
    which signals an incompatible refinement state rather than a large mesh.
    """
    marked = np.asarray(sorted(set(int(m) for m in marked)), dtype=np.int64)
    if marked.size == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.n_elements:
        raise ValueError("marked set contains invalid element ids")

    elements = mesh.elements.copy()
    tags = mesh.tags.copy()
    generation = mesh.generation.copy()
    vertices_list = []  # (lo, hi) endpoint pairs of the new midpoints
    parents_list = []
    split_map = {}
    nv0 = mesh.n_vertices

    select = np.zeros(mesh.n_elements, dtype=bool)
    select[marked] = True
    for _ in range(max_sweeps):
        elements, tags, generation = _bisect(
            elements, tags, generation, select, vertices_list, parents_list,
            split_map, nv0,
        )
        if not split_map:
            break
        # an element is non-conforming while any of its edges has been split
        split_codes = np.array(
            [lo * (nv0 + len(vertices_list) + 1) + hi for lo, hi in split_map],
            dtype=np.int64,
        )
        n1 = elements.shape[1]
        pairs = list(combinations(range(n1), 2))
        ea = elements[:, [p[0] for p in pairs]].astype(np.int64)
        eb = elements[:, [p[1] for p in pairs]].astype(np.int64)
        codes = (
            np.minimum(ea, eb) * np.int64(nv0 + len(vertices_list) + 1)
            + np.maximum(ea, eb)
        )
        select = np.isin(codes, split_codes).any(axis=1)
        if not select.any():
            break
    else:
        raise MeshConformityError(
            f"conformity closure did not terminate within {max_sweeps} sweeps"
        )

    if vertices_list:
        pairs = np.array(vertices_list, dtype=np.int64)
        # midpoints may chain onto midpoints created earlier in this call
        all_coords = np.vstack(
            [mesh.vertices, np.zeros((len(vertices_list), mesh.dim_d + 1))]
        )
        for i, (lo, hi) in enumerate(vertices_list):
            all_coords[nv0 + i] = 0.5 * (all_coords[lo] + all_coords[hi])
        vertices = all_coords
        parents = np.vstack([mesh.vertex_parents, pairs])
    else:
        vertices = mesh.vertices.copy()
        parents = mesh.vertex_parents.copy()

    return Mesh(
        dim_d=mesh.dim_d,
        vertices=vertices,
        elements=elements,
        tags=tags,
        generation=generation,
        vertex_parents=parents,
        parent=mesh,
    )


def element_size_field(mesh):
    """Per-element size h_tau = |tau|^(1/(d+1))."""
    return mesh.element_sizes().copy()


def boundary_facets(mesh):
    """Boundary facets with tags, as (facets (nb, d+1) vertex ids, tags (nb,)).

    A facet is on the boundary when it belongs to exactly one element; its tag
    is decided by coordinate predicates on all its vertices.
    """
    n1 = mesh.simplex_dim + 1
    facets = []
    for drop in range(n1):
        cols = [c for c in range(n1) if c != drop]
        facets.append(mesh.elements[:, cols])
    facets = np.vstack(facets)
    facets = np.sort(facets, axis=1)
    order = np.lexsort(facets.T[::-1])
    facets = facets[order]
    is_new = np.ones(facets.shape[0], dtype=bool)
    is_new[1:] = (facets[1:] != facets[:-1]).any(axis=1)
    group_id = np.cumsum(is_new) - 1
    counts = np.bincount(group_id)
    if counts.max() > 2:
        raise MeshConformityError("facet shared by more than two elements")
    bnd = facets[is_new][counts == 1]

    coords = mesh.vertices[bnd]  # (nb, n, d+1)
    t = coords[:, :, -1]
    tags = np.full(bnd.shape[0], BoundaryTag.LATERAL, dtype=np.int64)
    tags[(t <= GEOM_TOL).all(axis=1)] = BoundaryTag.BOTTOM
    tags[(t >= 1.0 - GEOM_TOL).all(axis=1)] = BoundaryTag.TOP
    lateral = np.zeros(bnd.shape[0], dtype=bool)
    for i in range(mesh.dim_d):
        xi = coords[:, :, i]
        lateral |= (xi <= GEOM_TOL).all(axis=1) | (xi >= 1.0 - GEOM_TOL).all(axis=1)
    bad = (tags == BoundaryTag.LATERAL) & ~lateral
    if bad.any():
        raise MeshConformityError("boundary facet not aligned with the unit cylinder")
    return bnd, tags


def check_conforming(mesh):
    """Raise unless every facet is shared by at most two elements."""
    boundary_facets(mesh)  # raises on >2 sharing
    return True


def shape_regularity(mesh):
    """Max circumradius/inradius ratio over all elements."""
    coords = mesh.element_coords()
    n = mesh.simplex_dim
    vols = mesh.volumes()
    # total facet measure per element, via Gram determinants
    n1 = n + 1
    surf = np.zeros(mesh.n_elements)
    for drop in range(n1):
        cols = [c for c in range(n1) if c != drop]
        fc = coords[:, cols, :]
        e = fc[:, 1:, :] - fc[:, :1, :]
        gram = np.einsum("eik,ejk->eij", e, e)
        surf += np.sqrt(np.maximum(np.linalg.det(gram), 0.0)) / factorial(n - 1)
    inradius = n * vols / surf
    # circumcenter from |c - v_i| = |c - v_0|
    v0 = coords[:, 0, :]
    rhs = 0.5 * (
        np.einsum("eik,eik->ei", coords[:, 1:, :], coords[:, 1:, :])
        - np.einsum("ek,ek->e", v0, v0)[:, None]
    )
    mat = coords[:, 1:, :] - v0[:, None, :]
    center = np.linalg.solve(mat, rhs[:, :, None])[:, :, 0]
    circum = np.linalg.norm(center - v0, axis=1)
    return float((circum / inradius).max())


VTK_CELL_TYPE = {1: 5, 2: 10}  # triangle, tetrahedron


def write_vtk(mesh, path, point_data=None):
    """Legacy-ASCII VTK export of the mesh and optional nodal fields.

    For d=1 the (x, t) plane is written with a zero third coordinate.
    """
    nv, ne = mesh.n_vertices, mesh.n_elements
    npts = mesh.simplex_dim + 1
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write("waveopt space-time mesh\n")
        f.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {nv} double\n")
        coords = np.zeros((nv, 3))
        coords[:, : mesh.dim_d + 1] = mesh.vertices
        for p in coords:
            f.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        f.write(f"CELLS {ne} {ne * (npts + 1)}\n")
        for el in mesh.elements:
            f.write(str(npts) + " " + " ".join(str(int(v)) for v in el) + "\n")
        f.write(f"CELL_TYPES {ne}\n")
        ct = VTK_CELL_TYPE[mesh.dim_d]
        f.write("\n".join([str(ct)] * ne) + "\n")
        if point_data:
            f.write(f"POINT_DATA {nv}\n")
            for name, values in point_data.items():
                values = np.asarray(values, dtype=float)
                if values.shape != (nv,):
                    raise ValueError(f"field {name!r} must have one value per vertex")
                f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                f.write("\n".join(f"{v:.17g}" for v in values) + "\n")


def save_mesh(mesh, path):
    """Binary snapshot: magic header + raw arrays."""
    with open(path, "wb") as f:
        f.write(SNAPSHOT_MAGIC)
        f.write(struct.pack("<qqq", mesh.dim_d, mesh.n_vertices, mesh.n_elements))
        f.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(mesh.elements, dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(mesh.tags, dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(mesh.generation, dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(mesh.vertex_parents, dtype="<i8").tobytes())


def load_mesh(path):
    with open(path, "rb") as f:
        magic = f.read(len(SNAPSHOT_MAGIC))
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(f"not a mesh snapshot (bad magic {magic!r})")
        d, nv, ne = struct.unpack("<qqq", f.read(24))
        n1 = d + 2
        vertices = np.frombuffer(f.read(8 * nv * (d + 1)), dtype="<f8").reshape(nv, d + 1).copy()
        elements = np.frombuffer(f.read(8 * ne * n1), dtype="<i8").reshape(ne, n1).copy()
        tags = np.frombuffer(f.read(8 * ne), dtype="<i8").copy()
        generation = np.frombuffer(f.read(8 * ne), dtype="<i8").copy()
        parents = np.frombuffer(f.read(8 * nv * 2), dtype="<i8").reshape(nv, 2).copy()
    return Mesh(
        dim_d=int(d),
        vertices=vertices,
        elements=elements,
        tags=tags,
        generation=generation,
        vertex_parents=parents,
    )
