import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp

from waveopt.amg import (
    AmgConfig,
    as_bp_block_preconditioner,
    estimate_contraction,
    setup,
    vcycles,
)
from waveopt.assembly import RegularizationField, assemble_spacetime_stiffness
from waveopt.experiments import axis_spacing, uniform_mesh
from waveopt.fespace import build_space


def laplacian_1d(n):
    return sp.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(n, n)).tocsr()


def dense_vcycle_map(h, count=1):
    n = h.n
    C = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        C[:, j] = vcycles(h, e, count)
    return C


def test_setup_coarsening_roughly_halves():
    h = setup(laplacian_1d(63), AmgConfig(max_coarse_size=8))
    sizes = [A.shape[0] for A in h.operators]
    assert sizes[0] == 63 and sizes[-1] <= 8
    for a, b in zip(sizes, sizes[1:]):
        assert 0.3 <= b / a <= 0.7


def test_setup_small_input_single_level():
    h = setup(laplacian_1d(20), AmgConfig(max_coarse_size=64))
    assert h.n_levels == 1
    b = np.arange(1.0, 21.0)
    x = vcycles(h, b, 1)
    assert np.allclose(laplacian_1d(20) @ x, b, atol=1e-11)


def test_setup_identity_one_application():
    h = setup(sp.eye(30, format="csr"), AmgConfig(max_coarse_size=8))
    b = np.linspace(-1, 1, 30)
    assert np.allclose(vcycles(h, b, 1), b, atol=1e-13)


@pytest.mark.filterwarnings("ignore::scipy.linalg.LinAlgWarning")
def test_setup_rejects_singular():
    singular = sp.csr_matrix(np.zeros((4, 4)))
    with pytest.raises(ValueError, match="singular"):
        setup(singular, AmgConfig(max_coarse_size=8))


def test_config_requires_symmetric_smoothing():
    with pytest.raises(ValueError):
        AmgConfig(pre_smooth=2, post_smooth=1)


def test_vcycles_zero_rhs():
    h = setup(laplacian_1d(63), AmgConfig(max_coarse_size=8))
    assert not vcycles(h, np.zeros(63), 3).any()


def test_vcycles_converge_to_direct():
    A = laplacian_1d(63)
    h = setup(A, AmgConfig(max_coarse_size=8))
    rng = np.random.default_rng(0)
    b = rng.standard_normal(63)
    xd = scipy.linalg.solve(A.toarray(), b)
    x = vcycles(h, b, 60)
    assert np.linalg.norm(x - xd) <= 1e-10 * np.linalg.norm(xd)


def test_vcycles_linearity():
    h = setup(laplacian_1d(63), AmgConfig(max_coarse_size=8))
    rng = np.random.default_rng(1)
    for _ in range(3):
        u, v = rng.standard_normal((2, 63))
        a = rng.standard_normal()
        lhs = vcycles(h, a * u + v, 2)
        rhs = a * vcycles(h, u, 2) + vcycles(h, v, 2)
        assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(rhs)


def test_vcycle_map_spd():
    h = setup(laplacian_1d(63), AmgConfig(max_coarse_size=8))
    rng = np.random.default_rng(2)
    for _ in range(5):
        u, v = rng.standard_normal((2, 63))
        cu, cv = vcycles(h, u, 1), vcycles(h, v, 1)
        assert abs(u @ cv - v @ cu) <= 1e-10 * max(abs(u @ cv), 1.0)
        assert u @ cu > 0


def test_galerkin_exactness():
    h = setup(laplacian_1d(127), AmgConfig(max_coarse_size=8))
    for Af, P, Ac in zip(h.operators, h.prolongations, h.operators[1:]):
        diff = sp.csr_matrix(P.T @ Af @ P) - Ac
        assert abs(diff).max() == 0.0


def test_contraction_matches_dense_on_two_levels():
    A = laplacian_1d(31)
    h = setup(A, AmgConfig(max_coarse_size=16))
    assert h.n_levels == 2
    eta = estimate_contraction(h, probes=120)
    C = dense_vcycle_map(h)
    E = np.eye(31) - C @ A.toarray()
    # ||E||_K: symmetric eigenproblem of K^(1/2) E K^(-1/2)
    K = A.toarray()
    L = scipy.linalg.cholesky(K, lower=True)
    S = scipy.linalg.solve_triangular(L, (L.T @ E).T, lower=True).T
    lam = np.abs(scipy.linalg.eigvalsh(0.5 * (S + S.T)))
    assert abs(eta - lam.max()) < 1e-6


def test_contraction_identity_zero():
    h = setup(sp.eye(10, format="csr"), AmgConfig(max_coarse_size=4))
    assert estimate_contraction(h) < 1e-12


def test_contraction_1d_laplacian_good():
    h = setup(laplacian_1d(255), AmgConfig(max_coarse_size=16))
    assert estimate_contraction(h, probes=60) < 0.3


def test_bp_preconditioner_validation():
    h = setup(laplacian_1d(63), AmgConfig(max_coarse_size=8))
    estimate_contraction(h)
    with pytest.raises(ValueError, match="delta"):
        as_bp_block_preconditioner(h, 1.0, 2)
    with pytest.raises(ValueError, match="delta"):
        as_bp_block_preconditioner(h, 0.0, 2)


def test_bp_preconditioner_rayleigh_bounds():
    A = laplacian_1d(63)
    h = setup(A, AmgConfig(max_coarse_size=8))
    eta = estimate_contraction(h, probes=80)
    delta, i = 0.25, 2
    apply_inv = as_bp_block_preconditioner(h, delta, i, eta)
    # dense Ahat from its inverse action
    n = 63
    Cinv = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        Cinv[:, j] = apply_inv(e)
    Ahat = np.linalg.inv(0.5 * (Cinv + Cinv.T))
    rng = np.random.default_rng(3)
    Ad = A.toarray()
    ratios = []
    for _ in range(100):
        v = rng.standard_normal(n)
        ratios.append((v @ (Ahat @ v)) / (v @ (Ad @ v)))
    ratios = np.array(ratios)
    assert (ratios < 1.0).all()
    assert (ratios > delta * (1 - eta**i) - 1e-8).all()


def test_eta_h_independent_on_energy_matrices():
    # the weighted space-time Laplacian across refinement levels keeps a
    # stable contraction number
    etas = []
    for level in range(1, 5):
        mesh = uniform_mesh(1, level)
        Ph = build_space(mesh, "adjoint")
        rho = RegularizationField.constant(axis_spacing(level) ** 2, mesh)
        K = assemble_spacetime_stiffness(Ph, weight=rho, inverse_weight=True)
        h = setup(K, AmgConfig())
        etas.append(estimate_contraction(h, probes=40))
    assert all(e < 1.0 for e in etas)
    assert max(etas) - min(etas) < 0.15


def test_stats_text():
    h = setup(laplacian_1d(63), AmgConfig(max_coarse_size=8))
    estimate_contraction(h)
    text = h.stats_text()
    assert "operator complexity" in text and "eta" in text
