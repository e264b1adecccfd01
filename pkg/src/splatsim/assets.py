"""Scene containers and the bundled synthetic scenes.

``SplatAsset`` is a single deformable object. ``RobotScene`` attaches rigid
splat assets to the bodies of a kinematic chain (body ``-1`` is the world).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import TriangleMesh, allocate_gaussians, make_icosphere
from .kinematics import Body, CameraMount, KinematicChain, TcpSite, forward_kinematics
from .raster import Camera, so3_exp
from .splatmesh import (FIXED_OPACITY_LOGIT, SurfelSet, WorldGaussians, bind_to_world, rgb_to_sh_dc,
                        sh_count, transform_gaussians, transform_gaussians_vjp)


def init_surfels(mesh: TriangleMesh, avg_per_face: float = 12, rng_seed: int = 0, *, sh_degree: int = 0,
                 opacity: float | None = 0.9, clamp: bool = True, colors=None,
                 scale_factor: float = 1.0) -> SurfelSet:
    """Scatter Gaussians over ``mesh``: area-proportional counts, uniform positions.

    ``opacity=None`` fixes opacity at 1. ``colors`` is an optional callable
    mapping points (N, 3) to RGB used for the degree-0 coefficients.
    """
    counts = allocate_gaussians(mesh, avg_per_face, rng_seed)
    fid = np.repeat(np.arange(mesh.n_faces), counts)
    n = len(fid)
    rng = np.random.default_rng([rng_seed, 1])
    # uniform point in triangle, expressed as barycentric logits
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    w = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    w = np.maximum(w, 1e-3)
    w /= w.sum(axis=1, keepdims=True)
    logits = np.log(w)
    area = mesh.face_areas()[fid]
    s = scale_factor * np.sqrt(area / (counts[fid] * np.pi))
    ls = np.log(np.stack([s, s], axis=1))
    sh = np.zeros((n, sh_count(sh_degree), 3))
    if colors is not None:
        pts = np.einsum("nk,nkj->nj", w, mesh.vertices[mesh.faces[fid]])
        sh[:, 0] = rgb_to_sh_dc(colors(pts))
    if opacity is None:
        op, fixed = np.full(n, FIXED_OPACITY_LOGIT), True
    else:
        op, fixed = np.full(n, np.log(opacity) - np.log1p(-opacity)), False
    return SurfelSet(fid, logits, ls, sh, op, fixed, None if clamp else ls[:, 0].copy())


@dataclass
class SplatAsset:
    mesh: TriangleMesh
    surfels: SurfelSet

    def gaussians(self) -> WorldGaussians:
        return bind_to_world(self.mesh, self.surfels)


@dataclass
class RigidPart:
    body: int
    asset: SplatAsset


@dataclass
class RobotScene:
    chain: KinematicChain
    parts: list

    def local_gaussians(self) -> list:
        return [p.asset.gaussians() for p in self.parts]


def pose_gaussians(scene: RobotScene, fk, local=None) -> WorldGaussians:
    """World Gaussians of every part at the body poses in ``fk``."""
    local = scene.local_gaussians() if local is None else local
    out = []
    for part, g in zip(scene.parts, local):
        if part.body < 0:
            out.append(g)
        else:
            out.append(transform_gaussians(g, fk.body_rotations[part.body], fk.body_positions[part.body]))
    return WorldGaussians.concatenate(out)


def pose_gaussians_vjp(scene: RobotScene, fk, local: list, cot: WorldGaussians):
    """Split a world cotangent into per-body ``[d, tau]`` cotangents and local cotangents."""
    body_cot = np.zeros((len(scene.chain.bodies), 6))
    locals_cot = []
    start = 0
    for part, g in zip(scene.parts, local):
        n = len(g)
        k = g.sh_coeffs.shape[1]
        piece = WorldGaussians(cot.means[start:start + n], cot.rotations[start:start + n],
                               cot.scales[start:start + n], cot.sh_coeffs[start:start + n, :k],
                               cot.opacities[start:start + n])
        start += n
        if part.body < 0:
            locals_cot.append(piece)
            continue
        g_d, g_tau, lc = transform_gaussians_vjp(g, fk.body_rotations[part.body], piece)
        body_cot[part.body, :3] += g_d
        body_cot[part.body, 3:] += g_tau
        locals_cot.append(lc)
    return body_cot, locals_cot


# --- procedural ground truth ---------------------------------------------------------

def smooth_texture(seed: int = 0, wavelength: float = 0.03):
    """A band-limited RGB field on R^3 with values in roughly [0.15, 0.85]."""
    rng = np.random.default_rng([seed, 7])
    k = rng.normal(size=(3, 3, 3))
    k *= (2.0 * np.pi / wavelength) / np.linalg.norm(k, axis=2, keepdims=True)
    ph = rng.random((3, 3)) * 2.0 * np.pi

    def colors(p):
        p = np.asarray(p, dtype=np.float64)
        out = np.empty((len(p), 3))
        for c in range(3):
            out[:, c] = 0.5 + 0.35 / 3.0 * np.sum(np.sin(p @ k[c].T + ph[c]), axis=1)
        return out

    return colors


def _gt_surfels(mesh, seed, per_face=4):
    return init_surfels(mesh, per_face, seed, opacity=None, colors=smooth_texture(seed), scale_factor=1.2)


def ellipsoid_asset(semi_axes=(0.055, 0.04, 0.03), center=(0.004, -0.003, 0.002), subdivisions=4,
                    seed: int = 0) -> SplatAsset:
    base = make_icosphere(subdivisions)
    v = base.vertices * np.asarray(semi_axes) + np.asarray(center)
    mesh = TriangleMesh(v, base.faces)
    return SplatAsset(mesh, _gt_surfels(mesh, seed))


def bumpy_sphere_asset(radius=0.045, amplitude=0.006, n_bumps=10, width=0.5, center=(0.0, 0.0, 0.0),
                       subdivisions=4, seed: int = 0) -> SplatAsset:
    base = make_icosphere(subdivisions)
    rng = np.random.default_rng([seed, 3])
    dirs = rng.normal(size=(n_bumps, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    sign = np.where(rng.random(n_bumps) < 0.5, -1.0, 1.0)
    u = base.vertices
    d2 = np.sum((u[:, None, :] - dirs[None]) ** 2, axis=2)
    bump = np.sum(sign * np.exp(-d2 / width**2), axis=1)
    v = u * (radius * (1.0 + amplitude / radius * bump))[:, None] + np.asarray(center)
    mesh = TriangleMesh(v, base.faces)
    return SplatAsset(mesh, _gt_surfels(mesh, seed))


def _box_mesh(size, n=4):
    """Closed box made of ``n x n`` quads per side, centered at the origin."""
    sx, sy, sz = np.asarray(size, dtype=np.float64) / 2.0
    verts, faces = [], []
    t = np.linspace(-1.0, 1.0, n + 1)
    for axis in range(3):
        for sgn in (-1.0, 1.0):
            a, b = [i for i in range(3) if i != axis]
            base = len(verts)
            for i in t:
                for j in t:
                    p = np.zeros(3)
                    p[axis] = sgn
                    p[a], p[b] = i, j
                    verts.append(p)
            for i in range(n):
                for j in range(n):
                    q0 = base + i * (n + 1) + j
                    q1, q2, q3 = q0 + 1, q0 + n + 1, q0 + n + 2
                    tri = [(q0, q2, q3), (q0, q3, q1)]
                    if (sgn > 0) != (axis == 1):
                        tri = [(x, z, y) for x, y, z in tri]
                    faces.extend(tri)
    v = np.array(verts) * np.array([sx, sy, sz])
    v, inv = np.unique(np.round(v, 12), axis=0, return_inverse=True)
    return TriangleMesh(v, inv.ravel()[np.array(faces)])


def _link_asset(length, width, seed, n=3):
    """A link box spanning local z in [0, length]."""
    box = _box_mesh((width, width, length), n)
    mesh = TriangleMesh(box.vertices + np.array([0.0, 0.0, length / 2.0]), box.faces)
    return SplatAsset(mesh, init_surfels(mesh, 6, seed, opacity=None,
                                         colors=smooth_texture(seed, wavelength=0.04), scale_factor=1.2))


_ARM_Q = np.array([0.0, 0.15, 0.45, 0.0, 0.7, 0.0])
NOMINAL_Q = np.concatenate([_ARM_Q, _ARM_Q * np.array([1, -1, -1, 1, -1, 1])])


def robot_scene(resolution: int = 128, seed: int = 0) -> RobotScene:
    """Two 6-DoF arms on a table with two fixed and two wrist cameras."""
    bodies = []
    parts = []
    lengths = [0.06, 0.12, 0.11, 0.05, 0.05, 0.04]
    axes = [(0, 0, 1), (0, 1, 0), (0, 1, 0), (0, 0, 1), (0, 1, 0), (0, 0, 1)]
    f = 1.1 * resolution
    intr = dict(fx=f, fy=f, cx=resolution / 2.0, cy=resolution / 2.0, width=resolution, height=resolution)
    cams = []
    tcps = []
    wrists = []
    for arm, x0 in enumerate((-0.16, 0.16)):
        parent = -1
        pos = np.array([x0, 0.0, 0.0])
        for k, (ln, ax) in enumerate(zip(lengths, axes)):
            idx = len(bodies)
            bodies.append(Body(f"arm{arm}_link{k}", parent, np.eye(3), pos, "revolute", np.array(ax, float)))
            parts.append(RigidPart(idx, _link_asset(ln, 0.035 - 0.003 * k, seed * 100 + arm * 10 + k)))
            parent = idx
            pos = np.array([0.0, 0.0, ln])
        wrists.append(parent)
        tcps.append(TcpSite(parent, np.array([0.0, 0.0, 0.06])))
    world = len(bodies)
    bodies.append(Body("table", -1, np.eye(3), np.zeros(3), "fixed", None))
    table_box = _box_mesh((0.6, 0.4, 0.02), 6)
    table = TriangleMesh(table_box.vertices + np.array([0.0, 0.05, -0.012]), table_box.faces)
    parts.append(RigidPart(world, SplatAsset(table, init_surfels(table, 6, seed * 100 + 99, opacity=None,
                                                                 colors=smooth_texture(seed + 50, 0.08),
                                                                 scale_factor=1.2))))
    target = np.array([0.0, 0.05, 0.12])
    for k, eye in enumerate(([0.05, -0.55, 0.35], [-0.45, 0.45, 0.45])):
        c = Camera.look_at(eye, target, **intr)
        r_cw, center = c.cam_to_world
        cams.append(CameraMount(f"fixed{k}", world, r_cw, center, intr, 1.0))
    # wrist cameras: aimed at the workspace at the nominal pose, rigid afterwards
    fk = forward_kinematics(KinematicChain(tuple(bodies)), NOMINAL_Q)
    for arm, b in enumerate(wrists):
        r_b, p_b = fk.body_rotations[b], fk.body_positions[b]
        offset = np.array([0.0, -0.04, 0.02])
        eye = p_b + r_b @ offset
        c = Camera.look_at(eye, [0.0, 0.06, 0.0], **intr)
        r_cw, _ = c.cam_to_world
        cams.append(CameraMount(f"wrist{arm}", b, r_b.T @ r_cw, offset, intr, 0.1))
    chain = KinematicChain(tuple(bodies), tuple(cams), tuple(tcps))
    return RobotScene(chain, parts)


def robot_trajectory(chain: KinematicChain, n_frames: int = 4, seed: int = 0) -> np.ndarray:
    """Joint states that keep both arms raised over the table."""
    rng = np.random.default_rng([seed, 11])
    out = NOMINAL_Q + rng.uniform(-0.3, 0.3, size=(n_frames, len(NOMINAL_Q)))
    assert out.shape[1] == chain.n_joints
    return out


def camera_poses(scene: RobotScene, q) -> list:
    fk = forward_kinematics(scene.chain, q)
    return [fk.camera(scene.chain, k) for k in range(len(scene.chain.cameras))]
