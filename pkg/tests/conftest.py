import numpy as np
import pytest

from waveopt.mesh import Mesh, build_initial_mesh, refine_uniform


def single_simplex_mesh(vertices):
    """Mesh made of one simplex with the given (n+1, n) coordinate rows."""
    vertices = np.asarray(vertices, dtype=float)
    n = vertices.shape[1]
    nv = vertices.shape[0]
    return Mesh(
        dim_d=n - 1,
        vertices=vertices.copy(),
        elements=np.arange(nv, dtype=np.int64)[None, :],
        tags=np.array([n], dtype=np.int64),
        generation=np.zeros(1, dtype=np.int64),
        vertex_parents=np.stack([np.arange(nv)] * 2, axis=1).astype(np.int64),
    )


@pytest.fixture(scope="session")
def mesh_d1_l1():
    return build_initial_mesh(1, 5)


@pytest.fixture(scope="session")
def mesh_d1_l2(mesh_d1_l1):
    return refine_uniform(mesh_d1_l1)


@pytest.fixture(scope="session")
def mesh_d2_l1():
    return build_initial_mesh(2, 5)


@pytest.fixture(scope="session")
def mesh_d2_l2(mesh_d2_l1):
    return refine_uniform(mesh_d2_l1)


@pytest.fixture(scope="session")
def mesh_d1_3x3():
    # 2x2 cells, 9 vertices: the hand-countable example mesh
    return build_initial_mesh(1, 3)
