"""Image divergences, the distance-transform mask target, SSIM, and the weighted total.

Every loss returns ``(value, cotangent)`` where the cotangent is the
gradient with respect to the predicted image.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from .errors import EmptyMaskError, ShapeError
from .geometry import TriangleMesh, edge_length_loss, laplacian_loss

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
L1_TIE = 1e-12


@dataclass
class LossWeights:
    photo: float = 1.0
    mask: float = 10.0
    smask: float = 1e-2
    normal: float = 3.0
    laplacian: float = 3.0
    edge: float = 0.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {k} must be finite and >= 0, got {v}")


@dataclass
class Observation:
    """One supervised frame. ``mask`` may be soft (rendered coverage) or binary."""

    camera: str
    rgb: np.ndarray
    mask: np.ndarray | None = None
    normal_map: np.ndarray | None = None
    weight: float = 1.0
    _smask_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        h, w = self.rgb.shape[:2]
        if self.rgb.shape != (h, w, 3):
            raise ShapeError(f"rgb must be (H, W, 3), got {self.rgb.shape}")
        if self.mask is not None and self.mask.shape != (h, w):
            raise ShapeError(f"mask shape {self.mask.shape} does not match rgb {self.rgb.shape}")
        if self.normal_map is not None and self.normal_map.shape != (h, w, 3):
            raise ShapeError(f"normal map shape {self.normal_map.shape} does not match rgb")

    @property
    def binary_mask(self) -> np.ndarray | None:
        return None if self.mask is None else self.mask >= 0.5

    def smask_target(self, tau: float, literal: bool) -> np.ndarray:
        key = (float(tau), bool(literal))
        if key not in self._smask_cache:
            self._smask_cache[key] = soft_mask_target(self.binary_mask, tau, literal)
        return self._smask_cache[key]


def _check_same(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def photometric_l1(pred, gt, mask=None):
    """Mean absolute error against ``gt`` multiplied by ``mask``; subgradient 0 at ties."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_same(pred, gt)
    target = gt
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        if m.shape != pred.shape[:2]:
            raise ShapeError(f"mask shape {m.shape} does not match image {pred.shape}")
        target = gt * m[..., None]
    diff = pred - target
    # rendering round-off counts as a tie; Adam would otherwise amplify its sign
    g = np.where(np.abs(diff) <= L1_TIE, 0.0, np.sign(diff))
    return float(np.mean(np.abs(diff))), g / diff.size


def mask_l2(pred_mask, gt_mask):
    pred = np.asarray(pred_mask, dtype=np.float64)
    gt = np.asarray(gt_mask, dtype=np.float64)
    _check_same(pred, gt)
    d = pred - gt
    return float(np.sum(d * d)), 2.0 * d


@numba.njit(cache=True)
def _edt_1d(f, out, v, z):
    """Lower envelope of parabolas rooted at (q, f[q]); writes squared distances to ``out``."""
    n = f.shape[0]
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d = q - v[k]
        out[q] = d * d + f[v[k]]


@numba.njit(cache=True)
def _edt_squared(fg):
    h, w = fg.shape
    big = 1e12  # exceeds any squared distance on images this size
    n = max(h, w)
    v = np.zeros(n, dtype=np.int64)
    z = np.zeros(n + 1)
    buf = np.zeros(n)
    out = np.zeros(n)
    col = np.zeros((h, w))
    for x in range(w):
        for y in range(h):
            buf[y] = 0.0 if fg[y, x] else big
        _edt_1d(buf[:h], out[:h], v, z)
        for y in range(h):
            col[y, x] = out[y]
    res = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            buf[x] = col[y, x]
        _edt_1d(buf[:w], out[:w], v, z)
        for x in range(w):
            res[y, x] = out[x]
    return res


def edt(mask) -> np.ndarray:
    """Exact Euclidean distance (pixels) to the nearest foreground pixel."""
    fg = np.asarray(mask).astype(bool)
    if fg.ndim != 2:
        raise ShapeError("mask must be 2-D")
    if not fg.any():
        raise EmptyMaskError("mask has no foreground pixel")
    return np.sqrt(_edt_squared(fg))


def soft_mask_target(gt_mask, tau: float = 25.0, literal: bool = False) -> np.ndarray:
    """``exp(-(edt/tau)^2)`` by default; the squared distance image when ``literal``."""
    d = edt(gt_mask)
    if literal:
        return d * d
    return np.exp(-((d / tau) ** 2))


def soft_mask_loss(pred_mask, gt_mask, tau: float = 25.0, literal: bool = False, target=None):
    if target is None:
        target = soft_mask_target(gt_mask, tau, literal)
    return mask_l2(pred_mask, target)


def normal_loss(pred_normals, gt_normals, mask=None):
    pred = np.asarray(pred_normals, dtype=np.float64)
    gt = np.asarray(gt_normals, dtype=np.float64)
    _check_same(pred, gt)
    d = pred - gt
    if mask is not None:
        d = d * np.asarray(mask, dtype=np.float64)[..., None]
        m = np.asarray(mask, dtype=np.float64)[..., None]
        return float(np.sum(d * d)), 2.0 * d * m
    return float(np.sum(d * d)), 2.0 * d


# --- SSIM -----------------------------------------------------------------------

def _gauss_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _filter_valid(x):
    """Separable Gaussian window, 'valid' extent, over the first two axes."""
    k = _KERNEL
    n = len(k)
    h, w = x.shape[:2]
    y = sum(k[i] * x[i: h - n + 1 + i] for i in range(n))
    return sum(k[j] * y[:, j: w - n + 1 + j] for j in range(n))


def _filter_valid_adjoint(g, shape):
    k = _KERNEL
    n = len(k)
    h, w = shape[:2]
    y = np.zeros((g.shape[0], w) + g.shape[2:])
    for j in range(n):
        y[:, j: w - n + 1 + j] += k[j] * g
    out = np.zeros((h, w) + g.shape[2:])
    for i in range(n):
        out[i: h - n + 1 + i] += k[i] * y
    return out


def _ssim_parts(a, b):
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu_a = _filter_valid(a)
    mu_b = _filter_valid(b)
    faa = _filter_valid(a * a)
    fbb = _filter_valid(b * b)
    fab = _filter_valid(a * b)
    var_a = faa - mu_a**2
    var_b = fbb - mu_b**2
    cov = fab - mu_a * mu_b
    a1 = 2.0 * mu_a * mu_b + c1
    a2 = 2.0 * cov + c2
    b1 = mu_a**2 + mu_b**2 + c1
    b2 = var_a + var_b + c2
    return (a1 * a2) / (b1 * b2), (mu_a, mu_b, a1, a2, b1, b2)


def _check_ssim_inputs(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ShapeError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    return a, b


def ssim(a, b) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, range 1), channels averaged."""
    a, b = _check_ssim_inputs(a, b)
    smap, _ = _ssim_parts(a, b)
    return float(np.mean(smap))


def ssim_vjp(a, b, g: float = 1.0):
    """Value and gradient of ``g * ssim(a, b)`` with respect to ``a``."""
    a, b = _check_ssim_inputs(a, b)
    smap, (mu_a, mu_b, a1, a2, b1, b2) = _ssim_parts(a, b)
    gs = g / smap.size
    den = b1 * b2
    # partials of each map entry w.r.t. mu_a, F(a*a) and F(a*b)
    d_mu = (2.0 * mu_b * a2 - 2.0 * mu_b * a1) / den - smap * (2.0 * mu_a / b1 - 2.0 * mu_a / b2)
    d_faa = -smap / b2
    d_fab = 2.0 * a1 / den
    grad = (_filter_valid_adjoint(gs * d_mu, a.shape)
            + 2.0 * a * _filter_valid_adjoint(gs * d_faa, a.shape)
            + b * _filter_valid_adjoint(gs * d_fab, a.shape))
    return float(np.mean(smap)), grad


# --- weighted total -------------------------------------------------------------

@dataclass
class LossBreakdown:
    total: float
    terms: dict
    cotangents: list  # per frame: {"rgb": ..., "mask": ..., "normals": ...}
    mesh_grad: np.ndarray | None


def frame_loss(images: dict, obs: Observation, weights: LossWeights, *, tau=25.0, literal=False,
               photo_masked=True):
    """Unweighted-by-frame data terms for one frame, with cotangents on the rendered images."""
    terms = {}
    cot = {}
    m = obs.mask
    if weights.photo > 0 and "rgb" in images:
        pm = None if (m is None or not photo_masked) else (m > 0).astype(np.float64)
        v, g = photometric_l1(images["rgb"], obs.rgb, pm)
        terms["photo"] = v
        cot["rgb"] = weights.photo * g
    if m is not None and "mask" in images:
        mask_cot = np.zeros_like(images["mask"])
        if weights.mask > 0:
            v, g = mask_l2(images["mask"], m)
            terms["mask"] = v
            mask_cot += weights.mask * g
        if weights.smask > 0 and obs.binary_mask.any():
            v, g = mask_l2(images["mask"], obs.smask_target(tau, literal))
            terms["smask"] = v
            mask_cot += weights.smask * g
        cot["mask"] = mask_cot
    if weights.normal > 0 and obs.normal_map is not None and "normals" in images:
        v, g = normal_loss(images["normals"], obs.normal_map, obs.binary_mask if m is not None else None)
        terms["normal"] = v
        cot["normals"] = weights.normal * g
    value = sum(getattr(weights, k) * v for k, v in terms.items())
    return value, terms, cot


def total_loss(rendered: list, observations: list, weights: LossWeights, mesh: TriangleMesh | None = None,
               *, tau=25.0, literal=False, photo_masked=True) -> LossBreakdown:
    """Frame-weighted data terms plus mesh regularizers.

    ``rendered[i]`` is a dict of images for ``observations[i]``; missing
    observation channels contribute nothing.
    """
    if len(rendered) != len(observations):
        raise ShapeError("one rendered bundle per observation required")
    total = 0.0
    terms: dict = {}
    cots = []
    for images, obs in zip(rendered, observations):
        v, t, c = frame_loss(images, obs, weights, tau=tau, literal=literal, photo_masked=photo_masked)
        total += obs.weight * v
        for k, x in t.items():
            terms[k] = terms.get(k, 0.0) + obs.weight * x
        cots.append({k: obs.weight * x for k, x in c.items()})
    mesh_grad = None
    if mesh is not None:
        mesh_grad = np.zeros_like(mesh.vertices)
        if weights.laplacian > 0:
            v, g = laplacian_loss(mesh)
            terms["laplacian"] = v
            total += weights.laplacian * v
            mesh_grad += weights.laplacian * g
        if weights.edge > 0:
            v, g = edge_length_loss(mesh)
            terms["edge"] = v
            total += weights.edge * v
            mesh_grad += weights.edge * g
    return LossBreakdown(float(total), terms, cots, mesh_grad)
