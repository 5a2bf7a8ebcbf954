import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp

from waveopt.assembly import (
    RegularizationField,
    assemble_mass,
    assemble_spacetime_stiffness,
    assemble_target_load,
    assemble_wave,
    export_matrix_market,
    lump,
)
from waveopt.fespace import build_space
from waveopt.mesh import Mesh, build_initial_mesh, refine_uniform
from waveopt.targets import TargetField, make_target
from conftest import single_simplex_mesh


REF_TRI = single_simplex_mesh([(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)])


def free(mesh):
    return build_space(mesh, "free")


def test_wave_local_reference_triangle():
    # hat at the right-angle corner has gradient (-1, -1): the dt and dx
    # contributions cancel exactly
    B = assemble_wave(free(REF_TRI), free(REF_TRI)).toarray()
    assert abs(B[0, 0]) < 1e-15
    # remaining entries from constant gradients (-1,-1), (1,0), (0,1), area 1/2
    g = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    expect = 0.5 * (np.outer(g[:, 0], g[:, 0]) - np.outer(g[:, 1], g[:, 1])).T
    assert np.allclose(B, expect, atol=1e-14)


def test_wave_axis_swap_negates(mesh_d1_3x3):
    B = assemble_wave(free(mesh_d1_3x3), free(mesh_d1_3x3)).toarray()
    swapped = Mesh(
        dim_d=1,
        vertices=mesh_d1_3x3.vertices[:, ::-1].copy(),
        elements=mesh_d1_3x3.elements.copy(),
        tags=mesh_d1_3x3.tags.copy(),
        generation=mesh_d1_3x3.generation.copy(),
        vertex_parents=mesh_d1_3x3.vertex_parents.copy(),
    )
    Bs = assemble_wave(free(swapped), free(swapped)).toarray()
    assert np.allclose(Bs, -B, atol=1e-13)


def test_wave_structural_zeros(mesh_d1_l1):
    Yh = build_space(mesh_d1_l1, "state")
    Ph = build_space(mesh_d1_l1, "adjoint")
    B = assemble_wave(Yh, Ph).tocsr()
    # disjoint supports never meet: vertices at opposite corners of the grid
    i = Ph.vertex_to_dof[Ph.free_dofs[0]]
    far = Yh.free_dofs[np.argmax(
        np.abs(mesh_d1_l1.vertices[Yh.free_dofs]
               - mesh_d1_l1.vertices[Ph.free_dofs[0]]).sum(axis=1))]
    assert B[i, Yh.vertex_to_dof[far]] == 0.0


def test_wave_space_mismatch(mesh_d1_l1, mesh_d1_l2):
    with pytest.raises(ValueError, match="different meshes"):
        assemble_wave(build_space(mesh_d1_l1, "state"),
                      build_space(mesh_d1_l2, "adjoint"))


def test_mass_local_reference_triangle():
    M = assemble_mass(free(REF_TRI)).toarray()
    expect = np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24.0
    assert np.allclose(M, expect, atol=1e-15)


def test_mass_inverse_weight_scaling():
    w = RegularizationField.constant(4.0, REF_TRI)
    M = assemble_mass(free(REF_TRI)).toarray()
    Mw = assemble_mass(free(REF_TRI), weight=w, inverse_weight=True).toarray()
    assert np.allclose(Mw, M / 4.0, atol=1e-16)


@pytest.mark.parametrize("d", [1, 2])
def test_total_mass_partition_of_unity(d):
    mesh = build_initial_mesh(d, 4)
    M = assemble_mass(free(mesh))
    ones = np.ones(mesh.n_vertices)
    assert abs(ones @ (M @ ones) - 1.0) < 1e-12


def test_lump_reference_triangle():
    D = lump(assemble_mass(free(REF_TRI)))
    assert np.allclose(D, [1 / 6, 1 / 6, 1 / 6], atol=1e-15)
    # idempotence: lumping an already diagonal matrix changes nothing
    assert np.allclose(lump(sp.diags(D).tocsr()), D)


def test_lump_rejects_negative_rows():
    bad = sp.csr_matrix(np.array([[1.0, -2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError, match="mass-type"):
        lump(bad)


def test_mass_lumping_generalized_eigs_triangle():
    M = assemble_mass(free(REF_TRI)).toarray()
    D = np.diag(lump(assemble_mass(free(REF_TRI))))
    lam = np.sort(scipy.linalg.eigh(M, D, eigvals_only=True))
    assert np.allclose(lam, [0.25, 0.25, 1.0], atol=1e-12)


@pytest.mark.parametrize("d", [1, 2])
def test_mass_lumping_bounds_assembled(d):
    mesh = refine_uniform(build_initial_mesh(d, 3))
    M = assemble_mass(free(mesh)).toarray()
    D = np.diag(lump(assemble_mass(free(mesh))))
    lam = scipy.linalg.eigh(M, D, eigvals_only=True)
    assert lam.min() >= 1.0 / (d + 3) - 1e-12
    assert lam.max() <= 1.0 + 1e-12


def test_stiffness_local_reference_triangle():
    w = RegularizationField.constant(1.0, REF_TRI)
    K = assemble_spacetime_stiffness(free(REF_TRI), weight=w,
                                     inverse_weight=True).toarray()
    expect = 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]])
    assert np.allclose(K, expect, atol=1e-14)


def test_stiffness_spd_on_adjoint_space(mesh_d1_3x3):
    Ph = build_space(mesh_d1_3x3, "adjoint")
    w = RegularizationField.constant(1.0, mesh_d1_3x3)
    K = assemble_spacetime_stiffness(Ph, weight=w, inverse_weight=True).toarray()
    lam = scipy.linalg.eigh(K, eigvals_only=True)
    assert lam.min() > 0


def test_stiffness_linear_in_inverse_weight(mesh_d1_l1):
    Ph = build_space(mesh_d1_l1, "adjoint")
    w1 = RegularizationField.local(2, mesh_d1_l1)
    w2 = RegularizationField("local", 2.0 * w1.rho_tau, exponent=2)
    K1 = assemble_spacetime_stiffness(Ph, weight=w1, inverse_weight=True)
    K2 = assemble_spacetime_stiffness(Ph, weight=w2, inverse_weight=True)
    assert np.allclose(K2.toarray(), K1.toarray() / 2.0, atol=1e-15)


def test_load_zero_and_partition_of_unity(mesh_d1_l1):
    zero = TargetField("zero", 1, "smooth", lambda p: np.zeros(p.shape[:-1]))
    one = TargetField("one", 1, "smooth", lambda p: np.ones(p.shape[:-1]))
    Fh = free(mesh_d1_l1)
    assert not assemble_target_load(Fh, zero).any()
    assert abs(assemble_target_load(Fh, one).sum() - 1.0) < 1e-13


def test_load_constant_inside_inclusion():
    # a simplex strictly inside (0.25,0.75)^2 sees the indicator as 1, so the
    # load rows equal plain mass row sums
    tri = single_simplex_mesh([(0.4, 0.4), (0.6, 0.4), (0.4, 0.6)])
    Fh = free(tri)
    load = assemble_target_load(Fh, make_target("discontinuous", 1))
    rows = np.asarray(assemble_mass(Fh).sum(axis=1)).ravel()
    assert np.allclose(load, rows, atol=1e-15)


def test_load_rejects_nonfinite(mesh_d1_l1):
    bad = TargetField("bad", 1, "smooth",
                      lambda p: np.full(p.shape[:-1], np.inf))
    with pytest.raises(ValueError, match="non-finite"):
        assemble_target_load(free(mesh_d1_l1), bad)


@pytest.mark.parametrize("d", [1, 2])
def test_symmetry_of_assembled_matrices(d):
    mesh = refine_uniform(build_initial_mesh(d, 3))
    Ph = build_space(mesh, "adjoint")
    rho = RegularizationField.local(2, mesh)
    for A in (assemble_mass(build_space(mesh, "state")),
              assemble_mass(Ph, weight=rho, inverse_weight=True),
              assemble_spacetime_stiffness(Ph, weight=rho, inverse_weight=True)):
        diff = (A - A.T).toarray()
        assert np.abs(diff).max() <= 1e-12 * np.abs(A.toarray()).max()


def test_wave_patch_test(mesh_d1_l2):
    # q^T B y must equal the direct element-loop integral of
    # -<dt y, dt q> + <dx y, dx q> for the P1 interpolants
    mesh = mesh_d1_l2
    Fh = free(mesh)
    yv = np.sin(1.3 * mesh.vertices[:, 0] + 0.4) * (mesh.vertices[:, 1] + 0.2)
    qv = np.cos(0.7 * mesh.vertices[:, 1]) * (mesh.vertices[:, 0] ** 2 + 1.0)
    B = assemble_wave(Fh, Fh)
    lhs = qv @ (B @ yv)

    coords = mesh.element_coords()
    edges = coords[:, 1:, :] - coords[:, :1, :]
    inv = np.linalg.inv(edges)
    grads = np.concatenate([-inv.transpose(0, 2, 1).sum(axis=1, keepdims=True),
                            inv.transpose(0, 2, 1)], axis=1)
    vol = mesh.volumes()
    gy = np.einsum("ea,eac->ec", yv[mesh.elements], grads)
    gq = np.einsum("ea,eac->ec", qv[mesh.elements], grads)
    rhs = float(np.sum(vol * (gy[:, 0] * gq[:, 0] - gy[:, 1] * gq[:, 1])))
    assert abs(lhs - rhs) < 1e-12 * max(abs(rhs), 1.0)


def test_assembly_bitwise_reproducible(mesh_d2_l1):
    Yh = build_space(mesh_d2_l1, "state")
    Ph = build_space(mesh_d2_l1, "adjoint")
    B1 = assemble_wave(Yh, Ph)
    B2 = assemble_wave(Yh, Ph)
    assert np.array_equal(B1.data, B2.data)
    assert np.array_equal(B1.indices, B2.indices)
    tgt = make_target("smooth", 2)
    assert np.array_equal(assemble_target_load(Yh, tgt),
                          assemble_target_load(Yh, tgt))


def test_regularization_field_validation(mesh_d1_l1):
    with pytest.raises(ValueError, match="positive"):
        RegularizationField.constant(-1.0, mesh_d1_l1)
    loc = RegularizationField.local(4, mesh_d1_l1)
    assert np.allclose(loc.rho_tau, mesh_d1_l1.element_sizes() ** 4)


def test_matrix_market_roundtrip(tmp_path, mesh_d1_l1):
    import scipy.io

    M = assemble_mass(build_space(mesh_d1_l1, "state"))
    path = tmp_path / "m.mtx"
    export_matrix_market(path, M)
    back = scipy.io.mmread(path).tocsr()
    assert np.allclose(back.toarray(), M.toarray(), atol=1e-15)
