import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from splatsim.assets import ellipsoid_asset
from splatsim.geometry import TriangleMesh, make_icosphere
from splatsim.kinematics import Body, KinematicChain, TcpSite
from splatsim.losses import Observation
from splatsim.metrics import (align_eval_cameras, chamfer, chamfer_brute, gaussians_digest, mesh_chamfer_mm2,
                              metrics_report, psnr, sample_surface, tcp_error, write_metrics)
from splatsim.raster import Camera, render
from splatsim.splatmesh import bind_to_world

UNIT_TRI = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float), np.array([[0, 1, 2]]))


def test_sample_centroid_unit_triangle():
    p = sample_surface(UNIT_TRI, 100_000, 0).points
    assert np.allclose(p.mean(axis=0)[:2], [1 / 3, 1 / 3], rtol=0.01)
    assert np.all(p[:, 2] == 0)
    assert np.all(p[:, 0] + p[:, 1] <= 1 + 1e-12) and np.all(p >= -1e-15)


def test_sample_counts_and_determinism():
    m = make_icosphere(2)
    assert len(sample_surface(m, 0, 0)) == 0
    a, b = sample_surface(m, 1234, 5), sample_surface(m, 1234, 5)
    assert len(a) == 1234 and np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, sample_surface(m, 1234, 6).points)


def test_sample_area_proportional():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 5], [3, 0, 5], [0, 1, 5]], float)
    m = TriangleMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))
    p = sample_surface(m, 40_000, 1).points
    assert np.mean(p[:, 2] > 1) == pytest.approx(0.75, abs=0.01)


def test_chamfer_hand_cases():
    a = np.random.default_rng(0).normal(size=(50, 3))
    assert chamfer(a, a) == 0
    assert chamfer(np.zeros((1, 3)), np.array([[1.0, 0, 0]])) == 1.0
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), a)


@given(seed=st.integers(0, 10**6), n=st.integers(1, 1000), m=st.integers(1, 1000))
def test_chamfer_equals_brute_force(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    # duplicates and near-ties stress the tree query
    if n > 2:
        a[1] = a[0]
    assert chamfer(a, b) == chamfer_brute(a, b)
    assert chamfer(a, b) == chamfer(b, a)


@given(seed=st.integers(0, 10**6))
def test_chamfer_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(200, 3)), rng.normal(size=(150, 3))
    r, t = Rotation.random(random_state=seed).as_matrix(), rng.normal(size=3)
    assert chamfer(a @ r.T + t, b @ r.T + t) == pytest.approx(chamfer(a, b), rel=1e-9)


def test_mesh_chamfer_units():
    # two 0.1 mm triangles 1 mm apart: in-plane sampling gaps are negligible
    v = np.array([[0, 0, 0], [1e-4, 0, 0], [0, 1e-4, 0]])
    a = TriangleMesh(v, np.array([[0, 1, 2]]))
    b = a.with_vertices(v + [0, 0, 1e-3])
    assert mesh_chamfer_mm2(a, b, 2000, 0) == pytest.approx(1.0, abs=1e-3)
    m = make_icosphere(2, 0.05)
    assert mesh_chamfer_mm2(m, m, 500, 3) == pytest.approx(
        chamfer(sample_surface(m, 500, 3).points * 1e3, sample_surface(m, 500, 4).points * 1e3))


def test_psnr_cases(rng):
    a = rng.random((8, 8, 3))
    assert psnr(a, a) == float("inf")
    assert psnr(np.full((4, 4), 0.1), np.zeros((4, 4))) == pytest.approx(20.0)
    assert psnr(np.ones((4, 4)), np.zeros((4, 4))) == 0.0


def test_tcp_error_cases():
    ch = KinematicChain((Body("s", -1, np.eye(3), np.zeros(3), "revolute", np.array([0, 0, 1.0])),
                         Body("p", 0, np.eye(3), np.array([0.1, 0, 0]))), (), (TcpSite(1, np.zeros(3)),))
    assert tcp_error(ch, [0.2], [0.2]) == 0
    q = 2 * np.arcsin(0.0015 / 0.1)  # chord of exactly 3 mm at 0.1 m
    assert tcp_error(ch, [q], [0.0]) == pytest.approx(3.0, abs=1e-9)
    assert tcp_error(ch, [[q], [0.0]], [[0.0], [0.0]]) == pytest.approx(1.5, abs=1e-9)


@pytest.fixture(scope="module")
def aligned_setup():
    asset = ellipsoid_asset(subdivisions=2)
    g = bind_to_world(asset.mesh, asset.surfels)
    cam = Camera.look_at([0.12, -0.25, 0.15], [0, 0, 0], fx=80, fy=80, cx=32, cy=32, width=64, height=64)
    return g, cam


def test_alignment_noop_at_exact_pose(aligned_setup):
    g, cam = aligned_setup
    img = render(g, cam).images["rgb"]
    digest = gaussians_digest(g)
    res = align_eval_cameras(g, [cam], [img], steps=10)
    assert np.max(np.abs(res.rot_deltas)) < 1e-6
    assert res.psnr_after[0] == res.psnr_before[0] == float("inf")
    assert gaussians_digest(g) == digest


def test_alignment_recovers_small_rotation(aligned_setup):
    g, cam = aligned_setup
    img = render(g, cam).images["rgb"]
    axis = np.array([0.3, -0.8, 0.5]) / np.linalg.norm([0.3, -0.8, 0.5])
    wrong = cam.perturbed(np.deg2rad(0.5) * axis)
    res = align_eval_cameras(g, [wrong], [Observation("c", img)], steps=60, lr=2e-4)
    assert res.psnr_after[0] >= res.psnr_before[0]
    assert res.psnr_after[0] > res.psnr_before[0] + 3
    with pytest.raises(ValueError):
        align_eval_cameras(g, [], [])


def test_metrics_report_json(tmp_path):
    import json

    rep = metrics_report(1.5, [20.0, float("inf")], [0.9, 1.0], 2.5, extra=1)
    assert rep["cd_mm2"] == 1.5 and rep["psnr_db"]["per_frame"][1] == 1e308
    assert rep["ssim"]["mean"] == pytest.approx(0.95) and rep["tcp_error_mm"] == 2.5
    write_metrics(tmp_path / "m.json", rep)
    assert json.loads((tmp_path / "m.json").read_text())["extra"] == 1
