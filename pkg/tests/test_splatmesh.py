import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from conftest import central_diff, rel_err
from splatsim.errors import NormalizationError, ShapeError
from splatsim.geometry import TriangleMesh, face_normals, make_icosphere
from splatsim.splatmesh import (SH_C0, SURFEL_EPS, SurfelSet, WorldGaussians, bind_to_world, bind_to_world_vjp,
                                eval_sh, load_splat_ply, save_splat_ply, sh_count, transform_gaussians,
                                transform_gaussians_vjp)


def tiny_scene(rng, n=10, degree=1, fixed=False, clamp=True, level=0):
    m = make_icosphere(level, 1.0)
    m = m.with_vertices(m.vertices + 0.1 * rng.normal(size=m.vertices.shape))
    s = SurfelSet(rng.integers(0, m.n_faces, n), rng.normal(size=(n, 3)), rng.normal(-1, 0.3, size=(n, 2)),
                  rng.normal(size=(n, sh_count(degree), 3)), rng.normal(size=n), fixed,
                  None if clamp else rng.normal(-2, 0.3, size=n))
    return m, s


def random_cot(rng, g):
    return WorldGaussians(*(rng.normal(size=a.shape) for a in
                            (g.means, g.rotations, g.scales, g.sh_coeffs, g.opacities)))


def dot(a, b):
    return sum(float(np.sum(x * y)) for x, y in
               zip((a.means, a.rotations, a.scales, a.sh_coeffs, a.opacities),
                   (b.means, b.rotations, b.scales, b.sh_coeffs, b.opacities)))


def test_eps_is_single_precision_epsilon():
    assert SURFEL_EPS == pytest.approx(1.2e-7, rel=0.01)


def test_zero_logits_give_centroid(rng):
    m, s = tiny_scene(rng)
    s.bary_logits[:] = 0
    g = bind_to_world(m, s)
    assert np.allclose(g.means, m.vertices[m.faces[s.face_id]].mean(axis=1), atol=1e-15)


def test_saturated_logits_give_vertex(rng):
    m, s = tiny_scene(rng)
    s.bary_logits[:] = [20.0, 0.0, 0.0]
    g = bind_to_world(m, s)
    assert np.max(np.linalg.norm(g.means - m.vertices[m.faces[s.face_id, 0]], axis=1)) < 1e-6


def test_world_gaussian_invariants(rng):
    m, s = tiny_scene(rng, 50)
    g = bind_to_world(m, s)
    rtr = np.einsum("nji,njk->nik", g.rotations, g.rotations)
    assert np.allclose(rtr, np.eye(3), atol=1e-9)
    assert np.allclose(np.linalg.det(g.rotations), 1.0, atol=1e-9)
    assert np.all(g.scales[:, 2] == SURFEL_EPS)
    v1 = m.vertices[m.faces[s.face_id, 0]]
    n = face_normals(m)[s.face_id]
    assert np.max(np.abs(np.sum((g.means - v1) * n, axis=1))) < 1e-9
    assert np.allclose(g.normals, n)
    assert np.all((g.opacities > 0) & (g.opacities < 1))


def test_smallest_covariance_eigenvalue_is_clamp(rng):
    m, s = tiny_scene(rng, 30)
    m = m.with_vertices(m.vertices * 0.05)
    s.tangent_log_scales[:] = np.log(rng.uniform(0.001, 0.01, size=(30, 2)))
    g = bind_to_world(m, s)
    # eigenvalues of R diag(s^2) R^T are the squared scales (exactly in the frame basis)
    lam = np.linalg.eigvalsh(np.einsum("nji,njk,nkl->nil", g.rotations, g.covariances(), g.rotations))
    assert np.allclose(lam[:, 0], SURFEL_EPS**2, rtol=1e-3)


def test_fixed_opacity_is_one(rng):
    m, s = tiny_scene(rng, fixed=True)
    assert np.all(bind_to_world(m, s).opacities == 1.0)


@given(seed=st.integers(0, 10_000))
def test_rigid_motion_equivariance(seed):
    rng = np.random.default_rng(seed)
    m, s = tiny_scene(rng)
    r = Rotation.random(random_state=seed).as_matrix()
    t = rng.normal(size=3)
    g = bind_to_world(m, s)
    h = bind_to_world(m.with_vertices(m.vertices @ r.T + t), s)
    assert np.allclose(h.means, g.means @ r.T + t, atol=1e-12)
    assert np.allclose(h.rotations, np.einsum("ij,njk->nik", r, g.rotations), atol=1e-12)
    assert np.array_equal(h.scales, g.scales)
    assert np.array_equal(h.sh_coeffs, g.sh_coeffs)
    assert np.array_equal(h.opacities, g.opacities)


def test_translation_changes_only_means(rng):
    m, s = tiny_scene(rng)
    g = bind_to_world(m, s)
    h = bind_to_world(m.with_vertices(m.vertices + [1.0, 2.0, 3.0]), s)
    assert np.allclose(h.means, g.means + [1, 2, 3])
    assert np.allclose(h.rotations, g.rotations, atol=1e-14)


def test_vjp_mean_cotangent_splits_evenly(rng):
    m, s = tiny_scene(rng, 1)
    s.bary_logits[:] = 0
    g = bind_to_world(m, s)
    cot = g.zeros_like()
    cot.means[0] = [1.0, -2.0, 0.5]
    grads = bind_to_world_vjp(m, s, cot)
    f = m.faces[s.face_id[0]]
    assert np.allclose(grads.vertices[f], np.tile([1 / 3, -2 / 3, 0.5 / 3], (3, 1)))
    others = np.setdiff1d(np.arange(m.n_vertices), f)
    assert not grads.vertices[others].any()


def test_vjp_zero_cotangent(rng):
    m, s = tiny_scene(rng)
    grads = bind_to_world_vjp(m, s, bind_to_world(m, s).zeros_like())
    for a in (grads.vertices, grads.bary_logits, grads.tangent_log_scales, grads.sh_coeffs, grads.opacity_logit):
        assert not np.any(a)


def test_vjp_shape_mismatch(rng):
    m, s = tiny_scene(rng)
    cot = bind_to_world(m, s).zeros_like()
    cot.means = cot.means[:-1]
    with pytest.raises(ShapeError):
        bind_to_world_vjp(m, s, cot)


@pytest.mark.parametrize("clamp", [True, False])
def test_vjp_matches_finite_differences(rng, clamp):
    m, s = tiny_scene(rng, 10, clamp=clamp)
    cot = random_cot(rng, bind_to_world(m, s))
    grads = bind_to_world_vjp(m, s, cot)
    h = 1e-6

    def through(**kw):
        def f(x):
            if "vertices" in kw:
                return dot(bind_to_world(m.with_vertices(x), s), cot)
            t = s.copy()
            setattr(t, kw["field"], x)
            return dot(bind_to_world(m, t), cot)
        return f

    assert rel_err(grads.vertices, central_diff(through(vertices=1), m.vertices, h)) < 1e-5
    for field in ("bary_logits", "tangent_log_scales", "sh_coeffs", "opacity_logit"):
        fd = central_diff(through(field=field), getattr(s, field), h)
        assert rel_err(getattr(grads, field), fd) < 1e-5, field
    if not clamp:
        fd = central_diff(through(field="normal_log_scale"), s.normal_log_scale, h)
        assert rel_err(grads.normal_log_scale, fd) < 1e-5


def test_transform_vjp_matches_finite_differences(rng):
    from splatsim.raster import so3_exp

    m, s = tiny_scene(rng)
    local = bind_to_world(m, s)
    r = Rotation.random(random_state=5).as_matrix()
    c = rng.normal(size=3)
    cot = random_cot(rng, local)
    g_d, g_tau, lc = transform_gaussians_vjp(local, r, cot)
    f_d = lambda d: dot(transform_gaussians(local, r @ so3_exp(d), c), cot)  # noqa: E731
    f_t = lambda t: dot(transform_gaussians(local, r, c + r @ t), cot)  # noqa: E731
    assert rel_err(g_d, central_diff(f_d, np.zeros(3), 1e-6)) < 1e-6
    assert rel_err(g_tau, central_diff(f_t, np.zeros(3), 1e-6)) < 1e-6
    fm = lambda x: dot(transform_gaussians(WorldGaussians(x, local.rotations, local.scales, local.sh_coeffs,  # noqa: E731
                                                          local.opacities), r, c), cot)
    assert rel_err(lc.means, central_diff(fm, local.means, 1e-6)) < 1e-6


# --- spherical harmonics ---------------------------------------------------------------

def test_sh_degree0_isotropic(rng):
    c = 0.7
    for _ in range(5):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        assert np.allclose(eval_sh(np.full((1, 3), c), d, 0), np.clip(0.28209479 * c + 0.5, 0, 1))
    assert SH_C0 == pytest.approx(0.28209479, abs=1e-8)


@pytest.mark.parametrize("degree", range(4))
def test_sh_zero_coeffs_mid_gray(rng, degree):
    d = rng.normal(size=(7, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    assert np.all(eval_sh(np.zeros((7, sh_count(degree), 3)), d, degree) == 0.5)


def test_sh_degree1_z_coefficient():
    c = 0.3
    sh = np.zeros((4, 3))
    sh[2] = c  # Y_1^0 is proportional to z
    diff = eval_sh(sh, [0, 0, 1.0], 1) - eval_sh(sh, [0, 0, -1.0], 1)
    assert np.allclose(np.abs(diff), 2 * 0.48860251 * c, atol=1e-8)


def test_sh_rejects_non_unit_direction():
    with pytest.raises(NormalizationError):
        eval_sh(np.zeros((1, 3)), [0, 0, 2.0], 0)


def test_sh_basis_orthonormal():
    # Monte Carlo over the sphere with a Fibonacci lattice
    from splatsim.splatmesh import sh_basis

    n = 200_000
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    phi = np.pi * (1 + 5**0.5) * i
    r = np.sqrt(1 - z * z)
    d = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    b = sh_basis(d, 3)
    gram = 4 * np.pi * b.T @ b / n
    assert np.allclose(gram, np.eye(16), atol=2e-3)


# --- splat PLY -----------------------------------------------------------------------------

def test_splat_ply_layout_and_round_trip(tmp_path, rng):
    from plyfile import PlyData

    m, s = tiny_scene(rng, 20, degree=2)
    g = bind_to_world(m, s)
    save_splat_ply(tmp_path / "s.ply", g)
    names = PlyData.read(str(tmp_path / "s.ply"))["vertex"].data.dtype.names
    assert names[:9] == ("x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2")
    assert sum(n.startswith("f_rest_") for n in names) == 3 * 9 - 3
    assert names[-8:] == ("opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")
    back = load_splat_ply(tmp_path / "s.ply")
    assert np.allclose(back.means, g.means, atol=1e-6)
    assert np.allclose(back.rotations, g.rotations, atol=1e-6)
    assert np.allclose(back.scales, g.scales, rtol=1e-6)
    assert np.allclose(back.sh_coeffs, g.sh_coeffs, atol=1e-6)
    assert np.allclose(back.opacities, g.opacities, atol=1e-6)
    # a second export differs at most by float32 rounding of the quaternion
    save_splat_ply(tmp_path / "t.ply", back)
    a = PlyData.read(str(tmp_path / "s.ply"))["vertex"].data
    b = PlyData.read(str(tmp_path / "t.ply"))["vertex"].data
    for name in names:
        assert np.allclose(a[name], b[name], rtol=0, atol=4 * np.finfo(np.float32).eps), name


@given(seed=st.integers(0, 10**6), n=st.integers(0, 40), degree=st.integers(0, 2))
def test_splat_ply_save_is_idempotent(tmp_path_factory, seed, n, degree):
    from splatsim.splatmesh import load_splat_ply, save_splat_ply

    rng = np.random.default_rng(seed)
    rot = Rotation.random(n, random_state=seed).as_matrix() if n else np.zeros((0, 3, 3))
    g = WorldGaussians(rng.normal(size=(n, 3)), rot, np.exp(rng.normal(-4, 1, size=(n, 3))),
                       rng.normal(size=(n, (degree + 1) ** 2, 3)), rng.uniform(0.01, 1.0, size=n))
    d = tmp_path_factory.mktemp("ply")
    save_splat_ply(d / "a.ply", g)
    save_splat_ply(d / "b.ply", load_splat_ply(d / "a.ply"))
    assert (d / "a.ply").read_bytes() == (d / "b.ply").read_bytes()
