import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import central_diff, rel_err
from splatsim.errors import StateError
from splatsim.geometry import make_icosphere
from splatsim.raster import Camera, RasterConfig, Rasterizer, project_gaussian, render, render_vjp
from splatsim.splatmesh import SH_C0, SurfelSet, WorldGaussians, bind_to_world, bind_to_world_vjp, rgb_to_sh_dc

FIELDS = ("means", "rotations", "scales", "sh_coeffs", "opacities")


def axis_camera(size=32, f=40.0):
    return Camera(f, f, size / 2, size / 2, size, size)


def one_gaussian(mean, std, rgb=(1.0, 1.0, 1.0), opacity=1.0):
    return WorldGaussians(np.array([mean], float), np.eye(3)[None], np.full((1, 3), std),
                          rgb_to_sh_dc(np.array(rgb, float))[None, None], np.array([opacity]))


def random_gaussians(rng, n=8, degree=1):
    return WorldGaussians(rng.uniform(-0.1, 0.1, (n, 3)), Rotation.random(n, random_state=rng.integers(1 << 30)).as_matrix(),
                          rng.uniform(0.02, 0.06, (n, 3)), rng.normal(0, 0.5, (n, (degree + 1) ** 2, 3)),
                          rng.uniform(0.3, 0.9, n))


def random_camera(size=32):
    return Camera.look_at([0.1, -0.6, 0.3], [0, 0, 0], fx=40, fy=42, cx=size / 2, cy=size / 2 - 0.5,
                          width=size, height=size)


def replace_field(g, name, value):
    kw = {k: getattr(g, k) for k in FIELDS}
    kw[name] = value
    return WorldGaussians(**kw)


# --- projection --------------------------------------------------------------------------

def test_on_axis_projects_to_principal_point():
    cam = Camera(50.0, 60.0, 10.3, 7.7, 20, 16)
    (mean2d, _, depth), = project_gaussian(one_gaussian([0, 0, 2.5], 0.01), cam)
    assert np.allclose(mean2d, [10.3, 7.7])
    assert depth == 2.5


def test_isotropic_covariance_projection():
    f, s, z = 40.0, 0.02, 1.5
    (_, cov, _), = project_gaussian(one_gaussian([0, 0, z], s), axis_camera(32, f))
    assert np.allclose(cov, ((f * s / z) ** 2 + 0.3) * np.eye(2), rtol=1e-12)


def test_behind_camera_culled():
    assert project_gaussian(one_gaussian([0, 0, -1.0], 0.01), axis_camera()) == [None]


def test_projection_matches_explicit_jacobian(rng):
    g = random_gaussians(rng, 5)
    cam = random_camera()
    for i, item in enumerate(project_gaussian(g, cam)):
        x = cam.rotation @ g.means[i] + cam.translation
        j = np.array([[cam.fx / x[2], 0, -cam.fx * x[0] / x[2] ** 2],
                      [0, cam.fy / x[2], -cam.fy * x[1] / x[2] ** 2]])
        sigma = g.rotations[i] @ np.diag(g.scales[i] ** 2) @ g.rotations[i].T
        ref = j @ cam.rotation @ sigma @ cam.rotation.T @ j.T + 0.3 * np.eye(2)
        assert np.allclose(item[1], ref, rtol=1e-10)
        assert np.allclose(item[0], [cam.fx * x[0] / x[2] + cam.cx, cam.fy * x[1] / x[2] + cam.cy])


# --- compositing ---------------------------------------------------------------------------

def test_empty_scene_is_background():
    out = render(WorldGaussians.empty(), axis_camera(), "rgb", (0.1, 0.2, 0.3))
    assert np.all(out.images["rgb"] == np.array([0.1, 0.2, 0.3]))
    assert np.all(out.alpha == 0)


def test_single_opaque_white_gaussian_clips_at_099():
    cam = Camera(40.0, 40.0, 16.0, 16.0, 32, 32)  # pixel (16, 16) sits on the axis
    out = render(one_gaussian([0, 0, 1.0], 0.01), cam)
    assert np.all(out.images["rgb"][16, 16] >= 0.99 - 1e-12)
    assert out.images["rgb"][16, 16, 0] == pytest.approx(0.99)


def test_front_to_back_ordering():
    cam = axis_camera()
    g = WorldGaussians.concatenate([one_gaussian([0, 0, 2.0], 0.2, (0, 1, 0)),
                                    one_gaussian([0, 0, 1.0], 0.025, (1, 0, 0))])
    img = render(g, cam).images["rgb"]
    c = img[16, 16]
    assert c[0] > 0.9 and c[1] < 0.05
    # green only where the red one does not reach
    assert img[16, 20, 1] > 0.5 > 0.01 > img[16, 20, 0]


def test_where_alpha_zero_color_is_background(rng):
    g = random_gaussians(rng)
    out = render(g, random_camera(), "rgb", (0.2, 0.4, 0.6))
    zero = out.alpha == 0
    assert zero.any()
    assert np.all(out.images["rgb"][zero] == [0.2, 0.4, 0.6])


def test_compositing_conservation(rng):
    g = random_gaussians(rng, 10)
    cam = random_camera()
    white = replace_field(g, "sh_coeffs", np.full_like(g.sh_coeffs[:, :1], 0.5 / SH_C0))
    black = replace_field(g, "sh_coeffs", np.full_like(g.sh_coeffs[:, :1], -0.5 / SH_C0))
    weights = render(white, cam, "rgb", (0, 0, 0)).images["rgb"][..., 0]
    t_final = render(black, cam, "rgb", (1, 1, 1)).images["rgb"][..., 0]
    assert np.max(np.abs(weights + t_final - 1.0)) < 1e-6
    out = render(g, cam, ("rgb", "mask"))
    assert np.max(np.abs(out.images["mask"] - out.alpha)) < 1e-12
    assert np.all((out.alpha >= 0) & (out.alpha <= 1))


def test_front_weight_monotone_in_opacity(rng):
    cam = axis_camera()
    front = one_gaussian([0.01, 0, 1.0], 0.03, (1, 1, 1), 0.3)
    back = one_gaussian([0, 0.01, 2.0], 0.06, (0, 0, 0), 0.9)
    prev = None
    for o in np.linspace(0.05, 1.0, 12):
        g = WorldGaussians.concatenate([replace_field(front, "opacities", np.array([o])), back])
        w = render(g, cam, "rgb", (0, 0, 0)).images["rgb"][..., 0]
        if prev is not None:
            assert np.all(w >= prev - 1e-15)
        prev = w


def test_normals_modality_encodes_camera_frame_normal():
    cam = axis_camera()
    g = one_gaussian([0, 0, 1.0], 0.05)
    # face normal toward the camera (-z in camera frame)
    g.rotations[0] = np.diag([1.0, -1.0, -1.0])
    out = render(g, cam, ("normals", "mask"))
    n, a = out.images["normals"][16, 16], out.alpha[16, 16]
    assert np.allclose(n, a * np.array([0.5, 0.5, 0.0]))


def test_render_deterministic(rng):
    g = random_gaussians(rng, 10)
    cam = random_camera()
    a = render(g, cam, ("rgb", "normals", "mask"))
    b = render(g, cam, ("rgb", "normals", "mask"))
    for m in a.images:
        assert a.images[m].tobytes() == b.images[m].tobytes()


# --- backward --------------------------------------------------------------------------------

MODS = ("rgb", "normals", "mask")
BG = {"rgb": [0.2, 0.3, 0.4]}


def _cot(rng, size=32):
    return {"rgb": rng.normal(size=(size, size, 3)), "normals": rng.normal(size=(size, size, 3)),
            "mask": rng.normal(size=(size, size))}


def _pairing(g, cam, cot, mods=MODS):
    out = render(g, cam, mods, BG)
    return sum(float(np.sum(out.images[m] * cot[m])) for m in mods)


def test_zero_cotangent_zero_gradients(rng):
    g, cam = random_gaussians(rng), random_camera()
    out = render(g, cam, MODS, BG)
    gr = render_vjp(g, cam, out.record, {m: np.zeros_like(out.images[m]) for m in MODS}, BG)
    for name in FIELDS:
        assert not np.any(getattr(gr.gaussians, name))
    assert not gr.cam_rotation.any() and not gr.cam_translation.any()


@pytest.mark.parametrize("mods", [("rgb",), ("normals",), ("mask",), MODS])
def test_render_vjp_matches_finite_differences(rng, mods):
    g, cam = random_gaussians(rng, 8), random_camera()
    cot = _cot(rng)
    out = render(g, cam, mods, BG)
    gr = render_vjp(g, cam, out.record, {m: cot[m] for m in mods}, BG)
    for name in FIELDS:
        fd = central_diff(lambda x: _pairing(replace_field(g, name, x), cam, cot, mods), getattr(g, name), 1e-6)
        if np.any(fd):
            assert rel_err(getattr(gr.gaussians, name), fd) < 1e-3, name
        else:
            assert not np.any(getattr(gr.gaussians, name)), name
    fd_r = central_diff(lambda d: _pairing(g, cam.perturbed(d), cot, mods), np.zeros(3), 1e-6)
    fd_t = central_diff(lambda t: _pairing(g, cam.perturbed(None, t), cot, mods), np.zeros(3), 1e-6)
    assert rel_err(gr.cam_rotation, fd_r) < 1e-3
    assert rel_err(gr.cam_translation, fd_t) < 1e-3


def test_optical_axis_translation_gradient():
    cam = axis_camera()
    g = one_gaussian([0, 0, 1.0], 0.04, (0.8, 0.8, 0.8), 0.7)
    out = render(g, cam)
    cot = np.zeros((32, 32, 3))
    cot[16, 18] = 1.0
    gr = render_vjp(g, cam, out.record, cot)
    h = 1e-6
    slope = (render(g, cam.perturbed(None, [0, 0, h])).images["rgb"][16, 18].sum()
             - render(g, cam.perturbed(None, [0, 0, -h])).images["rgb"][16, 18].sum()) / (2 * h)
    assert gr.cam_translation[2] == pytest.approx(slope, rel=1e-5)
    assert abs(slope) > 0


def test_stale_record_rejected(rng):
    g, cam = random_gaussians(rng), random_camera()
    out = render(g, cam)
    moved = replace_field(g, "means", g.means + 1e-3)
    with pytest.raises(StateError):
        render_vjp(moved, cam, out.record, np.ones((32, 32, 3)))
    with pytest.raises(StateError):
        render_vjp(g, cam, None, np.ones((32, 32, 3)))


def test_end_to_end_vertex_gradient(rng):
    m = make_icosphere(1, 0.08)
    n = 10
    s = SurfelSet(rng.integers(0, m.n_faces, n), rng.normal(size=(n, 3)), np.log(rng.uniform(0.01, 0.03, (n, 2))),
                  rng.normal(0, 0.5, (n, 1, 3)), rng.normal(size=n))
    cam = random_camera()
    cot = _cot(rng)
    r = Rasterizer(RasterConfig(blur=0.3))
    g = bind_to_world(m, s)
    out = r.render(g, cam, MODS, BG)
    gv = bind_to_world_vjp(m, s, r.render_vjp(g, cam, out.record, cot, BG).gaussians).vertices
    fd = central_diff(lambda x: _pairing(bind_to_world(m.with_vertices(x), s), cam, cot), m.vertices, 1e-6)
    assert rel_err(gv, fd) < 1e-3
