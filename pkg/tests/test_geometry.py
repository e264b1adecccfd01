import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import central_diff, rel_err
from splatsim.errors import BoundError, DegenerateGeometryError, ShapeError, TopologyError
from splatsim.geometry import (MeshDeformation, TriangleMesh, allocate_gaussians, apply_deformation,
                               edge_length_loss, face_normals, laplacian_loss, load_mesh_ply, make_icosphere,
                               save_mesh_ply)


def random_mesh(rng, level=1):
    m = make_icosphere(level)
    return m.with_vertices(m.vertices + 0.05 * rng.normal(size=m.vertices.shape))


def test_icosphere_counts_match_the_reference_init():
    m = make_icosphere(3, 0.05)
    assert m.n_vertices == 642
    assert m.n_faces == 1280
    assert np.allclose(np.linalg.norm(m.vertices, axis=1), 0.05, atol=1e-15)


def test_icosahedron_level_zero():
    m = make_icosphere(0, 1.0)
    assert (m.n_vertices, m.n_faces) == (12, 20)
    assert np.allclose(np.linalg.norm(m.vertices, axis=1), 1.0)


@pytest.mark.parametrize("k", range(5))
def test_icosphere_closed_and_outward(k):
    m = make_icosphere(k, 2.0, center=(1.0, -2.0, 0.5))
    assert m.n_vertices == 10 * 4**k + 2
    assert m.euler_characteristic() == 2
    # every edge shared by exactly two faces
    f = m.faces
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    assert np.all(counts == 2)
    centroid = m.vertices[f].mean(axis=1) - np.array([1.0, -2.0, 0.5])
    assert np.all(np.sum(face_normals(m) * centroid, axis=1) > 0)


def test_icosphere_bound():
    with pytest.raises(BoundError):
        make_icosphere(7)
    with pytest.raises(BoundError):
        make_icosphere(-1)


def test_adjacency_symmetric():
    m = make_icosphere(2)
    for i, nb in enumerate(m.adjacency):
        assert list(nb) == sorted(nb)
        for j in nb:
            assert i in m.adjacency[j]


def test_degenerate_face_named():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]], float)
    with pytest.raises(DegenerateGeometryError) as ei:
        TriangleMesh(v, np.array([[0, 1, 2], [0, 1, 3]]))
    assert ei.value.face_index == 1


def test_face_index_out_of_range():
    with pytest.raises(ShapeError):
        TriangleMesh(np.eye(3), np.array([[0, 1, 3]]))


def test_apply_deformation_cases(rng):
    m = make_icosphere(2)
    d0 = MeshDeformation.zeros(m.n_vertices)
    assert np.array_equal(apply_deformation(m, d0).vertices, m.vertices)
    t = np.array([0.1, -0.2, 0.3])
    moved = apply_deformation(m, MeshDeformation(np.zeros_like(m.vertices), t))
    assert np.allclose(moved.vertices, m.vertices + t)
    assert np.allclose(face_normals(moved), face_normals(m))
    back = apply_deformation(m, MeshDeformation(np.tile(-t, (m.n_vertices, 1)), t))
    assert np.allclose(back.vertices, m.vertices, atol=1e-15)
    assert back.faces is m.faces or np.array_equal(back.faces, m.faces)
    with pytest.raises(ShapeError):
        apply_deformation(m, MeshDeformation(np.zeros((3, 3)), t))


def test_topology_fixed_after_deformations(rng):
    m = make_icosphere(2)
    faces = m.faces.tobytes()
    adj = [a.tobytes() for a in m.adjacency]
    for _ in range(5):
        m = apply_deformation(m, MeshDeformation(0.01 * rng.normal(size=m.vertices.shape), rng.normal(size=3)))
    assert m.faces.tobytes() == faces
    assert [a.tobytes() for a in m.adjacency] == adj


def test_face_normal_right_hand_rule():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float)
    assert np.allclose(face_normals(TriangleMesh(v, np.array([[0, 1, 2]]))), [[0, 0, 1]])
    assert np.allclose(face_normals(TriangleMesh(v, np.array([[0, 2, 1]]))), [[0, 0, -1]])


def test_face_normals_rotate_with_mesh(rng):
    from scipy.spatial.transform import Rotation

    m = random_mesh(rng)
    r = Rotation.random(random_state=3).as_matrix()
    rotated = m.with_vertices(m.vertices @ r.T)
    assert np.allclose(face_normals(rotated), face_normals(m) @ r.T, atol=1e-12)
    assert np.allclose(np.linalg.norm(face_normals(m), axis=1), 1.0, atol=1e-12)


def _laplacian_bruteforce(m):
    total = 0.0
    for i, nb in enumerate(m.adjacency):
        d = m.vertices[i] - m.vertices[nb].mean(axis=0)
        total += d @ d
    return total


def test_laplacian_tetrahedron():
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], float) / np.sqrt(3)
    tet = TriangleMesh(v, np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]]))
    val, _ = laplacian_loss(tet)
    assert val == pytest.approx(_laplacian_bruteforce(tet), rel=1e-12)
    assert val == pytest.approx(64 / 9, rel=1e-12)


def test_laplacian_coincident_vertices_zero():
    m = make_icosphere(1)
    # coincident vertices skip validation through with_vertices
    val, g = laplacian_loss(m.with_vertices(np.zeros_like(m.vertices)))
    assert val == 0.0 and not g.any()


def test_laplacian_isolated_vertex():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], float)
    m = TriangleMesh(v, np.array([[0, 1, 2]]))
    with pytest.raises(TopologyError):
        laplacian_loss(m)


def test_laplacian_gradient_fd(rng):
    m = random_mesh(rng, 2)
    _, g = laplacian_loss(m)
    fd = central_diff(lambda x: laplacian_loss(m.with_vertices(x))[0], m.vertices, 1e-5)
    assert rel_err(g, fd) < 1e-5


def test_edge_loss_two_edges():
    from splatsim.geometry import _edge_length_loss

    v = np.array([[0, 0, 0], [1, 0, 0], [0, 3, 0]], float)
    val, _ = _edge_length_loss(v, np.array([[0, 1], [0, 2]]))
    assert val == pytest.approx(2.0)


def test_edge_loss_equal_edges_zero():
    v = np.array([[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]])
    val, _ = edge_length_loss(TriangleMesh(v, np.array([[0, 1, 2]])))
    assert val == pytest.approx(0.0, abs=1e-28)


def test_edge_loss_gradient_fd(rng):
    m = random_mesh(rng, 2)
    _, g = edge_length_loss(m)
    edges = m.edges

    def f(x):
        # the mean length is held fixed in the analytic gradient
        from splatsim.geometry import _edge_length_loss
        d = np.linalg.norm(x[edges[:, 0]] - x[edges[:, 1]], axis=1)
        return float(np.sum((d - mean0) ** 2))

    d0 = np.linalg.norm(m.vertices[edges[:, 0]] - m.vertices[edges[:, 1]], axis=1)
    mean0 = d0.mean()
    fd = central_diff(f, m.vertices, 1e-5)
    assert rel_err(g, fd) < 1e-5


@given(s=st.floats(0.1, 10.0), seed=st.integers(0, 1000))
def test_edge_loss_scales_quadratically(s, seed):
    m = random_mesh(np.random.default_rng(seed), 1)
    a, _ = edge_length_loss(m)
    b, _ = edge_length_loss(m.with_vertices(s * m.vertices))
    assert b == pytest.approx(s * s * a, rel=1e-9)


@given(seed=st.integers(0, 1000), t=st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_regularizers_translation_invariant(seed, t):
    m = random_mesh(np.random.default_rng(seed), 1)
    moved = m.with_vertices(m.vertices + np.array(t))
    assert laplacian_loss(moved)[0] == pytest.approx(laplacian_loss(m)[0], rel=1e-6, abs=1e-12)
    assert edge_length_loss(moved)[0] == pytest.approx(edge_length_loss(m)[0], rel=1e-6, abs=1e-12)


def test_allocation_equal_areas_exact():
    m = make_icosphere(0)  # congruent faces
    counts = allocate_gaussians(m, 12, 0)
    assert np.all(counts == 12)


def test_allocation_monte_carlo():
    # two faces with areas 1 and 3
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [3, 0, 1], [3, 6, 1], [5, 0, 1]], float)
    m = TriangleMesh(v, np.array([[0, 1, 2], [3, 5, 4]]))
    assert np.allclose(m.face_areas(), [1, 6])
    v2 = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [3, 0, 1], [5, 0, 1], [3, 3, 1]], float)
    m = TriangleMesh(v2, np.array([[0, 1, 2], [3, 4, 5]]))
    assert np.allclose(m.face_areas(), [1, 3])
    counts = np.array([allocate_gaussians(m, 2, s) for s in range(100000)])
    assert np.all(counts >= 0)
    assert counts[:, 0].mean() == pytest.approx(1.0, rel=0.01)
    assert counts[:, 1].mean() == pytest.approx(3.0, rel=0.01)


def test_allocation_fractional_expectation():
    m = make_icosphere(1).with_vertices(make_icosphere(1).vertices * [1.0, 1.3, 0.7])
    totals = [allocate_gaussians(m, 5.5, s).sum() for s in range(4000)]
    assert np.mean(totals) == pytest.approx(5.5 * m.n_faces, rel=0.005)
    assert np.array_equal(allocate_gaussians(m, 5.5, 7), allocate_gaussians(m, 5.5, 7))


def test_allocation_bounds():
    m = make_icosphere(0)
    with pytest.raises(BoundError):
        allocate_gaussians(m, 0.5, 0)
    with pytest.raises(BoundError):
        allocate_gaussians(m, 65, 0)


@pytest.mark.parametrize("binary", [True, False])
def test_mesh_ply_round_trip(tmp_path, binary):
    m = make_icosphere(2, 0.05)
    colors = np.random.default_rng(0).random((m.n_vertices, 3))
    save_mesh_ply(tmp_path / "m.ply", m, colors, binary=binary)
    back, c = load_mesh_ply(tmp_path / "m.ply")
    assert np.array_equal(back.faces, m.faces)
    assert np.array_equal(back.vertices, m.vertices.astype(np.float32).astype(np.float64))
    assert np.array_equal(c, np.round(colors * 255).astype(np.uint8))
