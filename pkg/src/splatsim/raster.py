"""Differentiable EWA splatting of world-space Gaussians.

Gaussians are sorted once per camera by camera-space depth and composited
front to back over their exact footprint (the ellipse where the pre-clip
alpha reaches ``alpha_min``). The backward pass walks the same order again,
recomputing transmittance front to back, so it never divides by an
underflowed transmittance.

Camera pose gradients use a right-multiplied increment on the camera pose
(camera-to-world): ``R_cw -> R_cw exp([d]x)``, ``c -> c + R_cw tau``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .errors import ShapeError, StateError
from .splatmesh import WorldGaussians, eval_sh_vjp, sh_basis, sh_degree

MODALITIES = ("rgb", "normals", "mask")
_WIDTH = {"rgb": 3, "normals": 3, "mask": 1}


def hat(v):
    v = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def vee_antisym(m):
    """``g`` such that ``<m, hat(d)> = g . d`` for any ``d``."""
    return np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])


def so3_exp(v):
    from scipy.spatial.transform import Rotation

    return Rotation.from_rotvec(np.asarray(v, dtype=np.float64)).as_matrix()


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. ``rotation``/``translation`` map world to camera: ``x_c = R x + t``.

    The camera looks down +z, x to the right, y down (pixel rows).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9 or np.linalg.det(r) < 0:
            raise ValueError("camera rotation must be a proper rotation")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def cam_to_world(self) -> tuple[np.ndarray, np.ndarray]:
        return self.rotation.T, self.center

    @classmethod
    def from_cam_to_world(cls, r_cw, center, **intrinsics) -> "Camera":
        r_cw = np.asarray(r_cw, dtype=np.float64)
        return cls(rotation=r_cw.T, translation=-r_cw.T @ np.asarray(center, dtype=np.float64), **intrinsics)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), **intrinsics) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        up = np.asarray(up, dtype=np.float64)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [0.0, 1.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return cls.from_cam_to_world(np.stack([x, y, z], axis=1), eye, **intrinsics)

    @property
    def intrinsics(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width, height=self.height)

    def perturbed(self, rot_delta=None, trans_delta=None) -> "Camera":
        """Apply the right-multiplied pose increment used for gradients."""
        if not np.any(rot_delta if rot_delta is not None else 0) and not np.any(
                trans_delta if trans_delta is not None else 0):
            return self  # exact: no round trip through the inverse pose
        r_cw, c = self.cam_to_world
        if trans_delta is not None:
            c = c + r_cw @ np.asarray(trans_delta, dtype=np.float64)
        if rot_delta is not None:
            r_cw = r_cw @ so3_exp(rot_delta)
        return Camera.from_cam_to_world(r_cw, c, **self.intrinsics)


@dataclass(frozen=True)
class RasterConfig:
    near: float = 0.01
    blur: float = 0.3
    alpha_max: float = 0.99
    alpha_min: float = 1.0 / 255.0
    det_min: float = 1e-12
    # contributions behind a pixel whose transmittance fell below this are dropped
    t_min: float = 0.0
    check_records: bool = True


@dataclass
class Projection:
    """Per-Gaussian screen-space quantities for one camera."""

    visible: np.ndarray  # bool (N,)
    p_cam: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray  # (N, 3): a, b, c of [[a, b], [b, c]]
    conic: np.ndarray  # (N, 3): the inverse, same layout
    n_singular: int

    @property
    def depth(self) -> np.ndarray:
        return self.p_cam[:, 2]


@dataclass
class ForwardRecord:
    fingerprint: str
    proj: Projection
    order: np.ndarray
    bbox: np.ndarray
    features: np.ndarray
    view_dirs: np.ndarray | None
    modalities: tuple
    image: np.ndarray  # composited (H, W, C), all modalities stacked


@dataclass
class RenderOutput:
    """Composited images. ``color`` is the first requested modality."""

    images: dict
    alpha: np.ndarray
    record: ForwardRecord
    diagnostics: dict

    @property
    def color(self) -> np.ndarray:
        return self.images[self.record.modalities[0]]


@dataclass
class RenderGrads:
    gaussians: WorldGaussians
    cam_rotation: np.ndarray  # tangent (3,)
    cam_translation: np.ndarray  # tangent (3,)
    world_to_cam_rotation: np.ndarray  # dL/dR for x_c = R x + t
    world_to_cam_translation: np.ndarray  # dL/dt


@numba.njit(cache=True)
def _project_forward(means, rots, scales, wr, t, fx, fy, cx, cy, near, blur, det_min):
    n = means.shape[0]
    p_cam = np.empty((n, 3))
    mean2d = np.zeros((n, 2))
    cov2d = np.zeros((n, 3))
    conic = np.zeros((n, 3))
    visible = np.zeros(n, dtype=np.bool_)
    n_singular = 0
    sig = np.empty((3, 3))
    m = np.empty((3, 3))
    sc = np.empty((3, 3))
    for i in range(n):
        for a in range(3):
            p_cam[i, a] = t[a] + wr[a, 0] * means[i, 0] + wr[a, 1] * means[i, 1] + wr[a, 2] * means[i, 2]
        x = p_cam[i, 0]
        y = p_cam[i, 1]
        z = p_cam[i, 2]
        if not z > near:
            continue
        # Sigma = R S^2 R^T, then W Sigma W^T
        for a in range(3):
            for b in range(3):
                sig[a, b] = (rots[i, a, 0] * rots[i, b, 0] * scales[i, 0] ** 2
                             + rots[i, a, 1] * rots[i, b, 1] * scales[i, 1] ** 2
                             + rots[i, a, 2] * rots[i, b, 2] * scales[i, 2] ** 2)
        for a in range(3):
            for b in range(3):
                m[a, b] = wr[a, 0] * sig[0, b] + wr[a, 1] * sig[1, b] + wr[a, 2] * sig[2, b]
        for a in range(3):
            for b in range(3):
                sc[a, b] = m[a, 0] * wr[b, 0] + m[a, 1] * wr[b, 1] + m[a, 2] * wr[b, 2]
        j00 = fx / z
        j02 = -fx * x / (z * z)
        j11 = fy / z
        j12 = -fy * y / (z * z)
        ca = j00 * j00 * sc[0, 0] + 2.0 * j00 * j02 * sc[0, 2] + j02 * j02 * sc[2, 2] + blur
        cb = j00 * j11 * sc[0, 1] + j00 * j12 * sc[0, 2] + j02 * j11 * sc[2, 1] + j02 * j12 * sc[2, 2]
        cc = j11 * j11 * sc[1, 1] + 2.0 * j11 * j12 * sc[1, 2] + j12 * j12 * sc[2, 2] + blur
        cov2d[i, 0] = ca
        cov2d[i, 1] = cb
        cov2d[i, 2] = cc
        det = ca * cc - cb * cb
        if not det >= det_min:
            n_singular += 1
            continue
        visible[i] = True
        conic[i, 0] = cc / det
        conic[i, 1] = -cb / det
        conic[i, 2] = ca / det
        mean2d[i, 0] = fx * x / z + cx
        mean2d[i, 1] = fy * y / z + cy
    return p_cam, mean2d, cov2d, conic, visible, n_singular


@numba.njit(cache=True)
def _project_backward(means, rots, scales, wr, fx, fy, p_cam, conic, visible, g_mean2d, g_conic,
                      g_means, g_rots, g_scales, g_wr, g_t):
    """Accumulates into the ``g_*`` output arrays in Gaussian index order."""
    n = means.shape[0]
    sig = np.empty((3, 3))
    m = np.empty((3, 3))
    sc = np.empty((3, 3))
    gsc = np.empty((3, 3))
    gsig = np.empty((3, 3))
    jac = np.zeros((2, 3))
    gj = np.empty((2, 3))
    gcov = np.empty((2, 2))
    tmp = np.empty((3, 3))
    for i in range(n):
        if not visible[i]:
            continue
        x = p_cam[i, 0]
        y = p_cam[i, 1]
        z = p_cam[i, 2]
        qa = conic[i, 0]
        qb = conic[i, 1]
        qc = conic[i, 2]
        ga = g_conic[i, 0]
        gb = 0.5 * g_conic[i, 1]
        gc = g_conic[i, 2]
        # G_cov = -Q G_Q Q
        t00 = qa * ga + qb * gb
        t01 = qa * gb + qb * gc
        t10 = qb * ga + qc * gb
        t11 = qb * gb + qc * gc
        gcov[0, 0] = -(t00 * qa + t01 * qb)
        gcov[0, 1] = -(t00 * qb + t01 * qc)
        gcov[1, 0] = -(t10 * qa + t11 * qb)
        gcov[1, 1] = -(t10 * qb + t11 * qc)
        for a in range(3):
            for b in range(3):
                sig[a, b] = (rots[i, a, 0] * rots[i, b, 0] * scales[i, 0] ** 2
                             + rots[i, a, 1] * rots[i, b, 1] * scales[i, 1] ** 2
                             + rots[i, a, 2] * rots[i, b, 2] * scales[i, 2] ** 2)
        for a in range(3):
            for b in range(3):
                m[a, b] = wr[a, 0] * sig[0, b] + wr[a, 1] * sig[1, b] + wr[a, 2] * sig[2, b]
        for a in range(3):
            for b in range(3):
                sc[a, b] = m[a, 0] * wr[b, 0] + m[a, 1] * wr[b, 1] + m[a, 2] * wr[b, 2]
        jac[0, 0] = fx / z
        jac[0, 2] = -fx * x / (z * z)
        jac[1, 1] = fy / z
        jac[1, 2] = -fy * y / (z * z)
        # g_sc = J^T G J ; g_J = 2 G J Sc
        for a in range(3):
            for b in range(3):
                acc = 0.0
                for u in range(2):
                    for v in range(2):
                        acc += jac[u, a] * gcov[u, v] * jac[v, b]
                gsc[a, b] = acc
        for u in range(2):
            for b in range(3):
                acc = 0.0
                for v in range(2):
                    for c in range(3):
                        acc += gcov[u, v] * jac[v, c] * sc[c, b]
                gj[u, b] = 2.0 * acc
        gm0 = g_mean2d[i, 0]
        gm1 = g_mean2d[i, 1]
        z2 = z * z
        z3 = z2 * z
        gpx = gm0 * fx / z - gj[0, 2] * fx / z2
        gpy = gm1 * fy / z - gj[1, 2] * fy / z2
        gpz = (-(gm0 * fx * x + gm1 * fy * y) / z2 - gj[0, 0] * fx / z2 + gj[0, 2] * 2.0 * fx * x / z3
               - gj[1, 1] * fy / z2 + gj[1, 2] * 2.0 * fy * y / z3)
        # g_sigma = W^T g_sc W
        for a in range(3):
            for b in range(3):
                tmp[a, b] = gsc[a, 0] * wr[0, b] + gsc[a, 1] * wr[1, b] + gsc[a, 2] * wr[2, b]
        for a in range(3):
            for b in range(3):
                gsig[a, b] = wr[0, a] * tmp[0, b] + wr[1, a] * tmp[1, b] + wr[2, a] * tmp[2, b]
        # G_W += 2 g_sc W Sigma  (tmp = g_sc W)
        for a in range(3):
            for b in range(3):
                g_wr[a, b] += 2.0 * (tmp[a, 0] * sig[0, b] + tmp[a, 1] * sig[1, b] + tmp[a, 2] * sig[2, b])
        gp = (gpx, gpy, gpz)
        for a in range(3):
            g_t[a] += gp[a]
            for b in range(3):
                g_wr[a, b] += gp[a] * means[i, b]
                g_means[i, b] += wr[a, b] * gp[a]
        # Sigma = R S^2 R^T
        for k in range(3):
            s2 = scales[i, k] ** 2
            quad = 0.0
            for a in range(3):
                acc = 0.0
                for b in range(3):
                    acc += gsig[a, b] * rots[i, b, k]
                g_rots[i, a, k] += 2.0 * acc * s2
                quad += rots[i, a, k] * acc
            g_scales[i, k] += 2.0 * scales[i, k] * quad


def project(g: WorldGaussians, cam: Camera, config: RasterConfig = RasterConfig()) -> Projection:
    p_cam, mean2d, cov2d, conic, visible, n_singular = _project_forward(
        np.ascontiguousarray(g.means, dtype=np.float64), np.ascontiguousarray(g.rotations, dtype=np.float64),
        np.ascontiguousarray(g.scales, dtype=np.float64), cam.rotation, cam.translation,
        float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy),
        config.near, config.blur, config.det_min)
    return Projection(visible, p_cam, mean2d, cov2d, conic, int(n_singular))


def project_gaussian(g: WorldGaussians, cam: Camera, config: RasterConfig = RasterConfig()):
    """Screen-space ``(mean2d, cov2d, depth)`` per Gaussian; ``None`` entries are culled."""
    proj = project(g, cam, config)
    out = []
    for i in range(len(g)):
        if proj.depth[i] <= config.near:
            out.append(None)
        else:
            a, b, c = proj.cov2d[i]
            out.append((proj.mean2d[i].copy(), np.array([[a, b], [b, c]]), float(proj.depth[i])))
    return out


@numba.njit(cache=True, inline="always")
def _row_span(dy, mx, ca, cb, cc, k2, x0, x1):
    """Pixel columns of one row inside the ellipse ``q(d) <= k2``, clipped to [x0, x1]."""
    disc = (cb * dy) ** 2 - ca * (cc * dy * dy - k2)
    if disc < 0.0:
        return 1, 0
    r = np.sqrt(disc)
    lo = np.ceil(mx + (-cb * dy - r) / ca - 1e-7)
    hi = np.floor(mx + (-cb * dy + r) / ca + 1e-7)
    a = max(int(lo), x0)
    b = min(int(hi), x1)
    return a, b


@numba.njit(cache=True)
def _composite_forward(order, mean2d, conic, opac, feat, bbox, bg, height, width, alpha_max, alpha_min, t_min):
    nc = feat.shape[1]
    img = np.zeros((height, width, nc))
    trans = np.ones((height, width))
    for k in range(order.shape[0]):
        i = order[k]
        mx = mean2d[i, 0]
        my = mean2d[i, 1]
        ca = conic[i, 0]
        cb = conic[i, 1]
        cc = conic[i, 2]
        o = opac[i]
        k2 = 2.0 * np.log(o / alpha_min)
        for py in range(bbox[i, 2], bbox[i, 3] + 1):
            dy = py - my
            x0, x1 = _row_span(dy, mx, ca, cb, cc, k2, bbox[i, 0], bbox[i, 1])
            for px in range(x0, x1 + 1):
                if trans[py, px] < t_min:
                    continue
                dx = px - mx
                power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                if power > 0.0:
                    continue
                alpha = o * np.exp(power)
                if alpha > alpha_max:
                    alpha = alpha_max
                if alpha < alpha_min:
                    continue
                tw = alpha * trans[py, px]
                for ch in range(nc):
                    img[py, px, ch] += feat[i, ch] * tw
                trans[py, px] *= 1.0 - alpha
    for py in range(height):
        for px in range(width):
            for ch in range(nc):
                img[py, px, ch] += bg[ch] * trans[py, px]
    return img, trans


@numba.njit(cache=True)
def _composite_backward(order, mean2d, conic, opac, feat, bbox, image, g_image, alpha_max, alpha_min, t_min):
    height, width, nc = image.shape
    n = feat.shape[0]
    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_feat = np.zeros((n, nc))
    trans = np.ones((height, width))
    prefix = np.zeros((height, width, nc))
    for k in range(order.shape[0]):
        i = order[k]
        mx = mean2d[i, 0]
        my = mean2d[i, 1]
        ca = conic[i, 0]
        cb = conic[i, 1]
        cc = conic[i, 2]
        o = opac[i]
        k2 = 2.0 * np.log(o / alpha_min)
        for py in range(bbox[i, 2], bbox[i, 3] + 1):
            dy = py - my
            x0, x1 = _row_span(dy, mx, ca, cb, cc, k2, bbox[i, 0], bbox[i, 1])
            for px in range(x0, x1 + 1):
                t = trans[py, px]
                if t < t_min:
                    continue
                dx = px - mx
                power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                if power > 0.0:
                    continue
                gauss = np.exp(power)
                alpha = o * gauss
                clipped = alpha > alpha_max
                if clipped:
                    alpha = alpha_max
                if alpha < alpha_min:
                    continue
                tw = alpha * t
                inv = 1.0 / (1.0 - alpha)
                g_alpha = 0.0
                for ch in range(nc):
                    contrib = feat[i, ch] * tw
                    prefix[py, px, ch] += contrib
                    gc = g_image[py, px, ch]
                    g_feat[i, ch] += tw * gc
                    behind = image[py, px, ch] - prefix[py, px, ch]
                    g_alpha += gc * (feat[i, ch] * t - behind * inv)
                trans[py, px] = t * (1.0 - alpha)
                if clipped:
                    continue
                g_opac[i] += gauss * g_alpha
                g_power = alpha * g_alpha
                g_mean2d[i, 0] += g_power * (ca * dx + cb * dy)
                g_mean2d[i, 1] += g_power * (cb * dx + cc * dy)
                g_conic[i, 0] += -0.5 * dx * dx * g_power
                g_conic[i, 1] += -dx * dy * g_power
                g_conic[i, 2] += -0.5 * dy * dy * g_power
    return g_mean2d, g_conic, g_opac, g_feat


def _fingerprint(g: WorldGaussians, cam: Camera, modalities, background) -> str:
    # cheap staleness check: shapes plus weighted sums of every input array
    h = hashlib.blake2b(digest_size=16)
    for a in (g.means, g.rotations, g.scales, g.sh_coeffs, g.opacities,
              cam.rotation, cam.translation, np.asarray(background, dtype=np.float64)):
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        h.update(repr((a.shape, float(a.sum()), float(a @ a), float(a[::3].sum()))).encode())
    h.update(repr((cam.intrinsics, modalities)).encode())
    return h.hexdigest()


def _normalize_backgrounds(modalities, background):
    bgs = []
    for m in modalities:
        if m not in _WIDTH:
            raise ValueError(f"unknown modality {m!r}")
        b = background.get(m) if isinstance(background, dict) else (background if m == "rgb" else None)
        if b is None:
            b = np.zeros(_WIDTH[m])
        b = np.broadcast_to(np.asarray(b, dtype=np.float64), (_WIDTH[m],))
        bgs.append(b)
    return np.concatenate(bgs)


class Rasterizer:
    """Immutable splatting renderer; forward records are returned per call."""

    def __init__(self, config: RasterConfig = RasterConfig()):
        self.config = config

    def _features(self, g, cam, proj, modalities):
        feats = []
        dirs = None
        for m in modalities:
            if m == "rgb":
                deg = sh_degree(g.sh_coeffs.shape[1])
                diff = g.means - cam.center
                dirs = diff / np.maximum(np.linalg.norm(diff, axis=1, keepdims=True), 1e-300)
                raw = np.einsum("nk,nkc->nc", sh_basis(dirs, deg), g.sh_coeffs) + 0.5
                feats.append(np.clip(raw, 0.0, 1.0))
            elif m == "normals":
                feats.append(g.normals @ cam.rotation.T * 0.5 + 0.5)
            else:
                feats.append(np.ones((len(g), 1)))
        return np.concatenate(feats, axis=1), dirs

    def render(self, gaussians: WorldGaussians, cam: Camera, modality="rgb", background=(0.0, 0.0, 0.0)) -> RenderOutput:
        """Render one or several modalities in a single compositing pass.

        ``modality`` is a name or a tuple of names; ``background`` is an RGB
        triple (applied to ``rgb``) or a dict per modality. Normal and mask
        backgrounds default to zero.
        """
        cfg = self.config
        modalities = (modality,) if isinstance(modality, str) else tuple(modality)
        bg = _normalize_backgrounds(modalities, background)
        g = gaussians
        proj = project(g, cam, cfg)
        feats, dirs = self._features(g, cam, proj, modalities)
        n = len(g)
        o = g.opacities
        with np.errstate(divide="ignore", invalid="ignore"):
            k2 = 2.0 * np.log(np.maximum(o, 1e-300) / cfg.alpha_min)
        live = proj.visible & (k2 > 0)
        rx = np.sqrt(np.where(live, k2 * proj.cov2d[:, 0], 0.0))
        ry = np.sqrt(np.where(live, k2 * proj.cov2d[:, 2], 0.0))
        bbox = np.zeros((n, 4), dtype=np.int64)
        if n:
            mx, my = proj.mean2d[:, 0], proj.mean2d[:, 1]
            with np.errstate(invalid="ignore"):
                bbox[:, 0] = np.clip(np.ceil(mx - rx), 0, cam.width).astype(np.int64)
                bbox[:, 1] = np.clip(np.floor(mx + rx), -1, cam.width - 1).astype(np.int64)
                bbox[:, 2] = np.clip(np.ceil(my - ry), 0, cam.height).astype(np.int64)
                bbox[:, 3] = np.clip(np.floor(my + ry), -1, cam.height - 1).astype(np.int64)
        live &= (bbox[:, 1] >= bbox[:, 0]) & (bbox[:, 3] >= bbox[:, 2])
        idx = np.flatnonzero(live)
        order = idx[np.argsort(proj.depth[idx], kind="stable")]
        img, trans = _composite_forward(order, proj.mean2d, proj.conic, o.astype(np.float64), feats,
                                        bbox, bg, cam.height, cam.width, cfg.alpha_max, cfg.alpha_min, cfg.t_min)
        images = {}
        col = 0
        for m in modalities:
            images[m] = img[:, :, col: col + _WIDTH[m]]
            if m == "mask":
                images[m] = images[m][:, :, 0]
            col += _WIDTH[m]
        fp = _fingerprint(g, cam, modalities, bg) if cfg.check_records else ""
        record = ForwardRecord(fp, proj, order, bbox, feats, dirs, modalities, img)
        diagnostics = {"n_rendered": int(len(order)), "n_singular": proj.n_singular,
                       "n_culled": int((proj.depth <= cfg.near).sum())}
        return RenderOutput(images, 1.0 - trans, record, diagnostics)

    def render_vjp(self, gaussians: WorldGaussians, cam: Camera, record: ForwardRecord,
                   cotangent, background=(0.0, 0.0, 0.0)) -> RenderGrads:
        """Pull image cotangents back to Gaussians and the camera pose.

        ``cotangent`` is an image for single-modality records or a dict
        keyed by modality.
        """
        if record is None:
            raise StateError("missing forward record")
        cfg = self.config
        modalities = record.modalities
        if cfg.check_records:
            bg = _normalize_backgrounds(modalities, background)
            if record.fingerprint != _fingerprint(gaussians, cam, modalities, bg):
                raise StateError("forward record does not match these inputs")
        h, w = cam.height, cam.width
        if not isinstance(cotangent, dict):
            cotangent = {modalities[0]: cotangent}
        g_img = np.zeros_like(record.image)
        col = 0
        for m in modalities:
            c = cotangent.get(m)
            if c is not None:
                c = np.asarray(c, dtype=np.float64)
                shape = (h, w) if m == "mask" else (h, w, 3)
                if c.shape != shape:
                    raise ShapeError(f"{m} cotangent has shape {c.shape}, expected {shape}")
                g_img[:, :, col: col + _WIDTH[m]] = c.reshape(h, w, -1)
            col += _WIDTH[m]
        return self._backward(gaussians, cam, record, g_img)

    def _backward(self, g, cam, record, g_img):
        cfg = self.config
        proj = record.proj
        g_mean2d, g_conic, g_opac, g_feat = _composite_backward(
            record.order, proj.mean2d, proj.conic, g.opacities.astype(np.float64), record.features,
            record.bbox, record.image, g_img, cfg.alpha_max, cfg.alpha_min, cfg.t_min)
        n = len(g)
        wr, t = cam.rotation, cam.translation
        g_means = np.zeros((n, 3))
        g_rot = np.zeros((n, 3, 3))
        g_scales = np.zeros((n, 3))
        g_sh = np.zeros_like(g.sh_coeffs)
        G_W = np.zeros((3, 3))
        g_t = np.zeros(3)
        g_center = np.zeros(3)

        col = 0
        for m in record.modalities:
            gf = g_feat[:, col: col + _WIDTH[m]]
            if m == "rgb":
                deg = sh_degree(g.sh_coeffs.shape[1])
                dirs = record.view_dirs
                g_sh, g_dir = eval_sh_vjp(g.sh_coeffs, dirs, deg, gf)
                diff = g.means - cam.center
                dist = np.linalg.norm(diff, axis=1, keepdims=True)
                g_diff = (g_dir - np.sum(g_dir * dirs, axis=1, keepdims=True) * dirs) / np.maximum(dist, 1e-300)
                g_means += g_diff
                g_center -= g_diff.sum(axis=0)
            elif m == "normals":
                # feature = 0.5 * R n + 0.5
                g_rot[:, :, 2] += 0.5 * gf @ wr
                G_W += 0.5 * gf.T @ g.normals
            col += _WIDTH[m]

        _project_backward(g.means, g.rotations, g.scales, wr, float(cam.fx), float(cam.fy), proj.p_cam,
                          proj.conic, proj.visible, g_mean2d, g_conic, g_means, g_rot, g_scales, G_W, g_t)

        # camera center c = -W^T t
        G_W += -np.outer(t, g_center)
        g_t += -wr @ g_center

        cot = WorldGaussians(g_means, g_rot, g_scales, g_sh, g_opac)
        d_rot, d_trans = world_to_cam_grad_to_tangent(wr, t, G_W, g_t)
        return RenderGrads(cot, d_rot, d_trans, G_W, g_t)


def world_to_cam_grad_to_tangent(wr, t, G_W, g_t):
    """Map ``dL/dR``, ``dL/dt`` of ``x_c = R x + t`` to the camera-pose tangent.

    With ``R_cw -> R_cw exp([d]x)`` and ``c -> c + R_cw tau`` the world-to-camera
    map becomes ``R -> E R``, ``t -> E t - tau`` with ``E = exp(-[d]x)``.
    """
    m = G_W @ wr.T + np.outer(g_t, t)
    return -vee_antisym(m), -np.asarray(g_t, dtype=np.float64)


_DEFAULT = Rasterizer()


def render(gaussians, cam, modality="rgb", background=(0.0, 0.0, 0.0), config: RasterConfig | None = None):
    return (Rasterizer(config) if config else _DEFAULT).render(gaussians, cam, modality, background)


def render_vjp(gaussians, cam, record, cotangent, background=(0.0, 0.0, 0.0), config: RasterConfig | None = None):
    return (Rasterizer(config) if config else _DEFAULT).render_vjp(gaussians, cam, record, cotangent, background)
