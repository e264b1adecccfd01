"""Gaussians bound to mesh faces.

Each Gaussian lives on one face: its mean is a softmax-weighted blend of the
face's vertices, its frame is (first edge, normal x edge, normal) and its
extent along the normal is clamped to ``SURFEL_EPS``. The functions here map
the bound parameters to world-space Gaussians and pull cotangents back.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DegenerateGeometryError, NormalizationError, ShapeError
from .geometry import DEGENERATE_AREA, TriangleMesh

SURFEL_EPS = float(np.finfo(np.float32).eps)
FIXED_OPACITY_LOGIT = 40.0  # sigmoid rounds to exactly 1.0 in float64

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


def sh_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree(n_coeffs: int) -> int:
    d = int(round(n_coeffs**0.5)) - 1
    if sh_count(d) != n_coeffs or not 0 <= d <= 3:
        raise ShapeError(f"{n_coeffs} SH coefficients do not form a degree 0..3 basis")
    return d


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


@dataclass
class SurfelSet:
    """Optimizable Gaussian parameters bound to mesh faces.

    ``sh_coeffs`` has shape ``(N, (d+1)**2, 3)``. ``normal_log_scale`` is only
    set when the surfel clamp is disabled; otherwise the normal extent is
    ``SURFEL_EPS``.
    """

    face_id: np.ndarray
    bary_logits: np.ndarray
    tangent_log_scales: np.ndarray
    sh_coeffs: np.ndarray
    opacity_logit: np.ndarray
    fixed_opacity: bool = False
    normal_log_scale: np.ndarray | None = None

    def __post_init__(self):
        self.face_id = np.asarray(self.face_id, dtype=np.int64)
        n = len(self.face_id)
        self.bary_logits = np.asarray(self.bary_logits, dtype=np.float64).reshape(n, 3)
        self.tangent_log_scales = np.asarray(self.tangent_log_scales, dtype=np.float64).reshape(n, 2)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64).reshape(n, -1, 3)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64).reshape(n)
        if self.normal_log_scale is not None:
            self.normal_log_scale = np.asarray(self.normal_log_scale, dtype=np.float64).reshape(n)
        sh_degree(self.sh_coeffs.shape[1])

    def __len__(self):
        return len(self.face_id)

    @property
    def degree(self) -> int:
        return sh_degree(self.sh_coeffs.shape[1])

    def copy(self) -> "SurfelSet":
        return replace(
            self,
            face_id=self.face_id.copy(),
            bary_logits=self.bary_logits.copy(),
            tangent_log_scales=self.tangent_log_scales.copy(),
            sh_coeffs=self.sh_coeffs.copy(),
            opacity_logit=self.opacity_logit.copy(),
            normal_log_scale=None if self.normal_log_scale is None else self.normal_log_scale.copy(),
        )

    def check_bound(self, mesh: TriangleMesh):
        if len(self) and (self.face_id.min() < 0 or self.face_id.max() >= mesh.n_faces):
            raise ShapeError("surfel face_id out of range for this mesh")


@dataclass
class WorldGaussians:
    """World-space Gaussians, struct-of-arrays.

    ``rotations[:, :, 2]`` is the surface normal; covariance is
    ``R diag(scales**2) R^T``.
    """

    means: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    sh_coeffs: np.ndarray
    opacities: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __len__(self):
        return len(self.means)

    @classmethod
    def empty(cls, degree: int = 0) -> "WorldGaussians":
        return cls(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3)),
                   np.zeros((0, sh_count(degree), 3)), np.zeros(0))

    @property
    def normals(self) -> np.ndarray:
        return self.rotations[:, :, 2]

    def covariances(self) -> np.ndarray:
        r = self.rotations
        return np.einsum("nij,nj,nkj->nik", r, self.scales**2, r)

    def zeros_like(self) -> "WorldGaussians":
        return WorldGaussians(*(np.zeros_like(a) for a in
                                (self.means, self.rotations, self.scales, self.sh_coeffs, self.opacities)))

    @staticmethod
    def concatenate(parts: list["WorldGaussians"]) -> "WorldGaussians":
        if not parts:
            return WorldGaussians.empty()
        k = max(p.sh_coeffs.shape[1] for p in parts)
        sh = []
        for p in parts:
            pad = np.zeros((len(p), k, 3))
            pad[:, : p.sh_coeffs.shape[1]] = p.sh_coeffs
            sh.append(pad)
        return WorldGaussians(
            np.concatenate([p.means for p in parts]),
            np.concatenate([p.rotations for p in parts]),
            np.concatenate([p.scales for p in parts]),
            np.concatenate(sh),
            np.concatenate([p.opacities for p in parts]),
        )


def scatter_rows(index, values, n):
    """``out[index[k]] += values[k]`` for ``(K, 3)`` values, in index order."""
    out = np.empty((n, values.shape[1]))
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(index, weights=values[:, c], minlength=n)
    return out


def _softmax(x):
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def face_frames(mesh: TriangleMesh):
    """Per-face orthonormal frames ``(F, 3, 3)`` plus the pieces the VJP needs."""
    v = mesh.vertices
    f = mesh.faces
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    c = np.cross(e1, e2)
    c_len = np.linalg.norm(c, axis=1)
    bad = np.flatnonzero(0.5 * c_len <= DEGENERATE_AREA)
    if bad.size:
        raise DegenerateGeometryError(f"face {bad[0]} is degenerate", face_index=int(bad[0]))
    e1_len = np.linalg.norm(e1, axis=1)
    u = e1 / e1_len[:, None]
    n = c / c_len[:, None]
    w = np.cross(n, u)
    frames = np.stack([u, w, n], axis=2)
    return frames, (e1, e2, e1_len, c_len, u, n)


def bind_to_world(mesh: TriangleMesh, surfels: SurfelSet) -> WorldGaussians:
    surfels.check_bound(mesh)
    frames, _ = face_frames(mesh)
    fid = surfels.face_id
    w = _softmax(surfels.bary_logits)
    tri = mesh.vertices[mesh.faces[fid]]  # (N, 3 verts, 3)
    means = np.einsum("nk,nkj->nj", w, tri)
    scales = np.empty((len(surfels), 3))
    scales[:, :2] = np.exp(surfels.tangent_log_scales)
    scales[:, 2] = SURFEL_EPS if surfels.normal_log_scale is None else np.exp(surfels.normal_log_scale)
    if surfels.fixed_opacity:
        opac = np.ones(len(surfels))
    else:
        opac = _sigmoid(surfels.opacity_logit)
    return WorldGaussians(means, frames[fid], scales, surfels.sh_coeffs.copy(), opac)


@dataclass
class SurfelGrads:
    vertices: np.ndarray
    bary_logits: np.ndarray
    tangent_log_scales: np.ndarray
    sh_coeffs: np.ndarray
    opacity_logit: np.ndarray
    normal_log_scale: np.ndarray | None = None


def bind_to_world_vjp(mesh: TriangleMesh, surfels: SurfelSet, cot: WorldGaussians) -> SurfelGrads:
    """Exact vector-Jacobian product of :func:`bind_to_world`."""
    n = len(surfels)
    expected = {"means": (n, 3), "rotations": (n, 3, 3), "scales": (n, 3),
                "sh_coeffs": surfels.sh_coeffs.shape, "opacities": (n,)}
    for name, shape in expected.items():
        if getattr(cot, name).shape != shape:
            raise ShapeError(f"cotangent {name} has shape {getattr(cot, name).shape}, expected {shape}")
    surfels.check_bound(mesh)
    frames, (e1, e2, e1_len, c_len, u, nrm) = face_frames(mesh)
    fid = surfels.face_id
    faces = mesh.faces
    nv, nf = mesh.n_vertices, mesh.n_faces

    w = _softmax(surfels.bary_logits)
    tri = mesh.vertices[faces[fid]]
    g_mu = cot.means
    # mean = sum_k w_k v_k
    g_tri = w[:, :, None] * g_mu[:, None, :]
    g_w = np.einsum("nkj,nj->nk", tri, g_mu)
    g_logits = w * (g_w - np.sum(w * g_w, axis=1, keepdims=True))

    # frame cotangents summed per face
    g_frame = scatter_rows(fid, cot.rotations.reshape(n, 9), nf).reshape(nf, 3, 3)
    g_u = g_frame[:, :, 0]
    g_v = g_frame[:, :, 1]
    g_n = g_frame[:, :, 2]
    # v = n x u
    g_n = g_n + np.cross(u, g_v)
    g_u = g_u + np.cross(g_v, nrm)
    g_e1 = (g_u - np.sum(g_u * u, axis=1, keepdims=True) * u) / e1_len[:, None]
    g_c = (g_n - np.sum(g_n * nrm, axis=1, keepdims=True) * nrm) / c_len[:, None]
    g_e1 = g_e1 + np.cross(e2, g_c)
    g_e2 = np.cross(g_c, e1)

    # per-face vertex cotangents first, then one scatter onto vertices
    g_fv = scatter_rows(fid, g_tri.reshape(n, 9), nf).reshape(nf, 3, 3)
    g_fv[:, 1] += g_e1
    g_fv[:, 2] += g_e2
    g_fv[:, 0] -= g_e1 + g_e2
    g_vert = scatter_rows(faces.reshape(-1), g_fv.reshape(-1, 3), nv)

    g_ls = cot.scales[:, :2] * np.exp(surfels.tangent_log_scales)
    g_nls = None
    if surfels.normal_log_scale is not None:
        g_nls = cot.scales[:, 2] * np.exp(surfels.normal_log_scale)
    if surfels.fixed_opacity:
        g_op = np.zeros(n)
    else:
        o = _sigmoid(surfels.opacity_logit)
        g_op = cot.opacities * o * (1.0 - o)
    return SurfelGrads(g_vert, g_logits, g_ls, cot.sh_coeffs.copy(), g_op, g_nls)


# --- rigid placement ---------------------------------------------------------------

def transform_gaussians(g: WorldGaussians, rotation, translation) -> WorldGaussians:
    """Place body-frame Gaussians in the world: ``mu -> R mu + t``, ``frame -> R frame``."""
    r = np.asarray(rotation, dtype=np.float64)
    t = np.asarray(translation, dtype=np.float64)
    return WorldGaussians(g.means @ r.T + t, np.einsum("ij,njk->nik", r, g.rotations),
                          g.scales.copy(), g.sh_coeffs.copy(), g.opacities.copy())


def transform_gaussians_vjp(g_local: WorldGaussians, rotation, cot: WorldGaussians):
    """Cotangent on the body pose for a right-multiplied increment.

    The body pose ``(R, c)`` is perturbed as ``R exp([d]x)``, ``c + R tau``;
    returns ``(g_d, g_tau)`` plus the cotangent on the local Gaussians.
    """
    r = np.asarray(rotation, dtype=np.float64)
    gm_body = cot.means @ r  # R^T g per row
    g_tau = gm_body.sum(axis=0)
    g_d = np.cross(g_local.means, gm_body).sum(axis=0)
    # frame term: <G, R [d]x F> = <R^T G F^T, [d]x>
    m = np.einsum("ji,njk,nlk->il", r, cot.rotations, g_local.rotations)
    g_d = g_d + np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    local = WorldGaussians(gm_body, np.einsum("ji,njk->nik", r, cot.rotations),
                           cot.scales.copy(), cot.sh_coeffs.copy(), cot.opacities.copy())
    return g_d, g_tau, local


# --- spherical harmonics -----------------------------------------------------------

def sh_basis(dirs: np.ndarray, degree: int, with_jacobian: bool = False):
    """Real SH basis ``(N, K)``; optionally its Jacobian ``(N, K, 3)`` w.r.t. the direction."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    n = len(dirs)
    k = sh_count(degree)
    b = np.zeros((n, k))
    jac = np.zeros((n, k, 3)) if with_jacobian else None
    b[:, 0] = SH_C0
    if degree >= 1:
        b[:, 1] = -SH_C1 * y
        b[:, 2] = SH_C1 * z
        b[:, 3] = -SH_C1 * x
        if with_jacobian:
            jac[:, 1, 1] = -SH_C1
            jac[:, 2, 2] = SH_C1
            jac[:, 3, 0] = -SH_C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        c = SH_C2
        b[:, 4] = c[0] * x * y
        b[:, 5] = c[1] * y * z
        b[:, 6] = c[2] * (2 * zz - xx - yy)
        b[:, 7] = c[3] * x * z
        b[:, 8] = c[4] * (xx - yy)
        if with_jacobian:
            zero = np.zeros(n)
            jac[:, 4] = c[0] * np.stack([y, x, zero], 1)
            jac[:, 5] = c[1] * np.stack([zero, z, y], 1)
            jac[:, 6] = c[2] * np.stack([-2 * x, -2 * y, 4 * z], 1)
            jac[:, 7] = c[3] * np.stack([z, zero, x], 1)
            jac[:, 8] = c[4] * np.stack([2 * x, -2 * y, zero], 1)
    if degree >= 3:
        c = SH_C3
        b[:, 9] = c[0] * y * (3 * xx - yy)
        b[:, 10] = c[1] * x * y * z
        b[:, 11] = c[2] * y * (4 * zz - xx - yy)
        b[:, 12] = c[3] * z * (2 * zz - 3 * xx - 3 * yy)
        b[:, 13] = c[4] * x * (4 * zz - xx - yy)
        b[:, 14] = c[5] * z * (xx - yy)
        b[:, 15] = c[6] * x * (xx - 3 * yy)
        if with_jacobian:
            jac[:, 9] = c[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, zero], 1)
            jac[:, 10] = c[1] * np.stack([y * z, x * z, x * y], 1)
            jac[:, 11] = c[2] * np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], 1)
            jac[:, 12] = c[3] * np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], 1)
            jac[:, 13] = c[4] * np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], 1)
            jac[:, 14] = c[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], 1)
            jac[:, 15] = c[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, zero], 1)
    return (b, jac) if with_jacobian else b


def eval_sh_raw(sh_coeffs: np.ndarray, dirs: np.ndarray, degree: int) -> np.ndarray:
    """Unclamped ``sum_k c_k Y_k(dir) + 0.5`` for unit ``dirs`` of shape ``(N, 3)``."""
    k = sh_count(degree)
    return np.einsum("nk,nkc->nc", sh_basis(dirs, degree), sh_coeffs[:, :k]) + 0.5


def eval_sh(sh_coeffs, view_direction, degree: int) -> np.ndarray:
    """RGB in [0, 1] from SH coefficients seen along ``view_direction``.

    Accepts a single Gaussian (``(K, 3)`` coefficients, one direction) or a
    batch (``(N, K, 3)``, ``(N, 3)``).
    """
    sh = np.asarray(sh_coeffs, dtype=np.float64)
    d = np.asarray(view_direction, dtype=np.float64)
    single = sh.ndim == 2
    if single:
        sh, d = sh[None], d.reshape(1, 3)
    if not 0 <= degree <= 3 or sh.shape[1] < sh_count(degree):
        raise ShapeError(f"need {sh_count(degree)} coefficients for degree {degree}")
    norms = np.linalg.norm(d, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise NormalizationError("view direction must be unit length")
    rgb = np.clip(eval_sh_raw(sh, d, degree), 0.0, 1.0)
    return rgb[0] if single else rgb


def eval_sh_vjp(sh_coeffs, dirs, degree, g_rgb):
    """Cotangents on the coefficients and on the (unit) direction, clamp included."""
    k = sh_count(degree)
    basis, jac = sh_basis(dirs, degree, with_jacobian=True)
    raw = np.einsum("nk,nkc->nc", basis, sh_coeffs[:, :k]) + 0.5
    g = np.where((raw > 0.0) & (raw < 1.0), g_rgb, 0.0)
    g_sh = np.zeros_like(sh_coeffs)
    g_sh[:, :k] = basis[:, :, None] * g[:, None, :]
    g_basis = np.einsum("nkc,nc->nk", sh_coeffs[:, :k], g)
    g_dir = np.einsum("nk,nkj->nj", g_basis, jac)
    return g_sh, g_dir


# --- splat PLY -----------------------------------------------------------------------

def rotation_to_quaternion(r: np.ndarray) -> np.ndarray:
    """(w, x, y, z) with w >= 0 for a stack of rotation matrices."""
    from scipy.spatial.transform import Rotation

    r = np.asarray(r, dtype=np.float64)
    q = Rotation.from_matrix(r.reshape(-1, 3, 3)).as_quat()  # x, y, z, w
    q = np.concatenate([q[:, 3:], q[:, :3]], axis=1)
    q = q * np.where(q[:, :1] < 0, -1.0, 1.0)
    return q[0] if r.ndim == 2 else q


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    q = np.asarray(q, dtype=np.float64)
    q2 = q.reshape(-1, 4)
    r = Rotation.from_quat(np.concatenate([q2[:, 1:], q2[:, :1]], axis=1)).as_matrix()
    return r[0] if q.ndim == 1 else r


def _splat_names(k: int) -> list:
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (k - 1))]
    return names + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


def _snap_unit_f32(q: np.ndarray) -> np.ndarray:
    """float32 unit vectors that renormalizing in float64 and rounding maps to themselves."""
    def fixed(c):
        c64 = c.astype(np.float64)
        return np.all((c64 / np.linalg.norm(c64, axis=-1, keepdims=True)).astype(np.float32) == c, axis=-1)

    out = q.astype(np.float32)
    bad = np.nonzero(~fixed(out))[0]
    if len(bad):
        steps = np.array(np.meshgrid(*[[0, -1, 1]] * q.shape[1], indexing="ij")).reshape(q.shape[1], -1).T
        base = out[bad][:, None, :]
        cand = np.where(steps > 0, np.nextafter(base, np.float32(np.inf)),
                        np.where(steps < 0, np.nextafter(base, np.float32(-np.inf)), base))
        ok = fixed(cand)
        err = np.linalg.norm(cand.astype(np.float64) - q[bad][:, None, :], axis=-1)
        pick = np.argmin(np.where(ok, err, np.inf), axis=1)
        found = ok[np.arange(len(bad)), pick]
        out[bad[found]] = cand[found, pick[found]]
    return out


def _encode_splats(g: WorldGaussians) -> np.ndarray:
    n = len(g)
    cols = [g.means, g.normals, g.sh_coeffs[:, 0, :]]
    # f_rest is channel-major: all red coefficients, then green, then blue
    cols.append(np.transpose(g.sh_coeffs[:, 1:, :], (0, 2, 1)).reshape(n, 3 * (g.sh_coeffs.shape[1] - 1)))
    o = np.clip(g.opacities, 0.0, 1.0)
    with np.errstate(divide="ignore"):
        logit = np.where(o >= 1.0, FIXED_OPACITY_LOGIT, np.log(o) - np.log1p(-o))
    cols.append(np.maximum(logit, -FIXED_OPACITY_LOGIT)[:, None])
    cols.append(np.log(g.scales))
    cols.append(_snap_unit_f32(rotation_to_quaternion(g.rotations)) if n else np.zeros((0, 4)))
    return np.concatenate(cols, axis=1).astype(np.float32)


def _decode_splats(data: np.ndarray, k: int) -> WorldGaussians:
    d = np.asarray(data, dtype=np.float64)
    n = len(d)
    sh = np.zeros((n, k, 3))
    sh[:, 0] = d[:, 6:9]
    r = 9 + 3 * (k - 1)
    if k > 1:
        sh[:, 1:] = np.transpose(d[:, 9:r].reshape(n, 3, k - 1), (0, 2, 1))
    logit = d[:, r]
    opac = np.where(logit >= FIXED_OPACITY_LOGIT, 1.0, _sigmoid(logit))
    scales = np.exp(d[:, r + 1:r + 4])
    rot = quaternion_to_rotation(d[:, r + 4:r + 8]) if n else np.zeros((0, 3, 3))
    return WorldGaussians(d[:, :3].copy(), rot, scales, sh, opac)


def save_splat_ply(path, g: WorldGaussians, comments=()) -> None:
    """Binary PLY in the common splat layout (logit opacity, log scales, wxyz quaternion).

    The float32 record is a fixed point of decode/encode, so saving a loaded
    file reproduces it byte for byte.
    """
    from plyfile import PlyData, PlyElement

    k = g.sh_coeffs.shape[1]
    names = _splat_names(k)
    data = _encode_splats(g)
    for _ in range(8):
        again = _encode_splats(_decode_splats(data, k))
        if np.array_equal(again, data):
            break
        data = again
    arr = np.empty(len(g), dtype=[(name, "f4") for name in names])
    for i, name in enumerate(names):
        arr[name] = data[:, i]
    PlyData([PlyElement.describe(arr, "vertex")], text=False,
            comments=list(comments)).write(str(Path(path)))


def load_splat_ply(path) -> WorldGaussians:
    from plyfile import PlyData

    v = PlyData.read(str(Path(path)))["vertex"].data
    k = 1 + sum(1 for s in v.dtype.names if s.startswith("f_rest_")) // 3
    data = np.stack([np.asarray(v[name], dtype=np.float64) for name in _splat_names(k)], axis=1)
    return _decode_splats(data.reshape(len(v), len(_splat_names(k))), k)
