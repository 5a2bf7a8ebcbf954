import numpy as np
import pytest

from waveopt.mesh import (
    BoundaryTag,
    boundary_facets,
    build_initial_mesh,
    check_conforming,
    element_size_field,
    load_mesh,
    refine_adaptive,
    refine_uniform,
    save_mesh,
    shape_regularity,
    write_vtk,
)
from conftest import single_simplex_mesh


def count_edges(mesh):
    return np.unique(mesh.edge_codes().ravel()).size


def test_initial_mesh_d2_counts(mesh_d2_l1):
    # the 4x4x4 cube grid split into 6 tets each
    assert mesh_d2_l1.n_vertices == 125
    assert mesh_d2_l1.n_elements == 384
    assert abs(mesh_d2_l1.volumes().sum() - 1.0) < 1e-12
    check_conforming(mesh_d2_l1)


def test_initial_mesh_d1_single_cell():
    m = build_initial_mesh(1, 2)
    assert m.n_vertices == 4
    assert m.n_elements == 2
    _, tags = boundary_facets(m)
    assert (tags != BoundaryTag.INTERIOR).all()
    assert tags.size == 4  # all four unit-square edges on the boundary


def test_initial_mesh_d1_euler(mesh_d1_3x3):
    # 2x2 cells: V - E + F = 1 for a triangulated disc
    assert mesh_d1_3x3.n_vertices == 9
    assert mesh_d1_3x3.n_elements == 8
    euler = 9 - count_edges(mesh_d1_3x3) + 8
    assert euler == 1


def test_initial_mesh_validation():
    with pytest.raises(ValueError, match="dimension"):
        build_initial_mesh(3, 5)
    with pytest.raises(ValueError):
        build_initial_mesh(1, 1)


def test_uniform_refinement_counts(mesh_d2_l1, mesh_d2_l2):
    assert mesh_d2_l2.n_vertices == 729  # (2^3+1)^3
    assert mesh_d2_l2.n_elements == 8 * 384
    m3 = refine_uniform(mesh_d2_l2)
    assert m3.n_vertices == 17**3
    assert abs(m3.volumes().sum() - 1.0) < 1e-12
    check_conforming(m3)


def test_uniform_refinement_d1():
    m = refine_uniform(build_initial_mesh(1, 2))
    assert m.n_elements == 8
    assert m.n_vertices == 9
    assert abs(m.volumes().sum() - 1.0) < 1e-14


def test_shape_regularity_stable_under_refinement(mesh_d2_l1):
    r1 = shape_regularity(mesh_d2_l1)
    m = refine_uniform(refine_uniform(mesh_d2_l1))
    assert abs(shape_regularity(m) - r1) < 1e-9


def test_adaptive_empty_marks(mesh_d1_l1):
    assert refine_adaptive(mesh_d1_l1, []) is mesh_d1_l1


def test_adaptive_single_mark_closure():
    # bisecting one of the two triangles forces its diagonal neighbour too
    m = build_initial_mesh(1, 2)
    r = refine_adaptive(m, [0])
    assert r.n_elements == 4
    assert r.n_vertices == 5
    check_conforming(r)


def test_full_marking_twice_quadruples_d1():
    m = build_initial_mesh(1, 3)
    r = refine_adaptive(m, range(m.n_elements))
    r = refine_adaptive(r, range(r.n_elements))
    assert r.n_elements == 4 * m.n_elements
    check_conforming(r)
    assert abs(r.volumes().sum() - 1.0) < 1e-12


@pytest.mark.parametrize("d", [1, 2])
def test_adaptive_fuzz_conformity(d):
    rng = np.random.default_rng(42 + d)
    mesh = build_initial_mesh(d, 3)
    for _ in range(6):
        k = rng.integers(1, max(2, mesh.n_elements // 3))
        marked = rng.choice(mesh.n_elements, size=k, replace=False)
        mesh = refine_adaptive(mesh, marked)
        check_conforming(mesh)
        assert abs(mesh.volumes().sum() - 1.0) < 1e-12
        # every facet shared by at most two elements is verified inside
        # check_conforming; also assert generations are sane
        assert mesh.generation.max() <= 6 * (d + 1) * 4


@pytest.mark.parametrize("d", [1, 2])
def test_tag_inheritance_predicates(d):
    rng = np.random.default_rng(7)
    mesh = build_initial_mesh(d, 3)
    for _ in range(3):
        marked = rng.choice(mesh.n_elements, size=2, replace=False)
        mesh = refine_adaptive(mesh, marked)
    facets, tags = boundary_facets(mesh)
    coords = mesh.vertices[facets]
    t = coords[..., -1]
    for fi, tag in enumerate(tags):
        if (t[fi] <= 1e-12).all():
            assert tag == BoundaryTag.BOTTOM
        elif (t[fi] >= 1 - 1e-12).all():
            assert tag == BoundaryTag.TOP
        else:
            assert tag == BoundaryTag.LATERAL


def test_element_sizes_unit_right_triangle():
    m = single_simplex_mesh([(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)])
    assert abs(element_size_field(m)[0] - np.sqrt(0.5)) < 1e-15


def test_element_sizes_reference_tet():
    m = single_simplex_mesh(
        [(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)]
    )
    assert abs(element_size_field(m)[0] - (1.0 / 6.0) ** (1.0 / 3.0)) < 1e-15


def test_element_sizes_uniform(mesh_d2_l2):
    h = element_size_field(mesh_d2_l2)
    assert np.ptp(h) < 1e-14
    # |tau|^(1/3) for a sixth of the (1/8)^3 cube
    assert abs(h[0] - ((0.125**3) / 6.0) ** (1.0 / 3.0)) < 1e-14


def test_boundary_facet_counts_d1(mesh_d1_3x3):
    _, tags = boundary_facets(mesh_d1_3x3)
    assert (tags == BoundaryTag.BOTTOM).sum() == 2
    assert (tags == BoundaryTag.TOP).sum() == 2
    assert (tags == BoundaryTag.LATERAL).sum() == 4


def test_vtk_and_snapshot_roundtrip(tmp_path, mesh_d1_l1):
    vtk = tmp_path / "m.vtk"
    write_vtk(mesh_d1_l1, vtk, {"f": np.arange(mesh_d1_l1.n_vertices, dtype=float)})
    text = vtk.read_text()
    assert "UNSTRUCTURED_GRID" in text and "POINT_DATA" in text

    snap = tmp_path / "m.bin"
    save_mesh(mesh_d1_l1, snap)
    back = load_mesh(snap)
    assert back.dim_d == mesh_d1_l1.dim_d
    assert np.array_equal(back.vertices, mesh_d1_l1.vertices)
    assert np.array_equal(back.elements, mesh_d1_l1.elements)
    with pytest.raises(ValueError, match="magic"):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"NOTAMESH" + b"\0" * 64)
        load_mesh(bad)


def test_checksum_stability(mesh_d1_l1):
    a = mesh_d1_l1.checksum()
    b = build_initial_mesh(1, 5).checksum()
    assert a == b
    assert a != refine_uniform(mesh_d1_l1).checksum()
