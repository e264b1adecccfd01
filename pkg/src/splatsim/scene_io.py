"""Datasets on disk, synthetic dataset generation and asset export.

A dataset directory holds ``manifest.json`` plus ``rgb/``, ``mask/`` and
``normal/`` PNGs. RGB and masks are 8-bit; normal maps are 16-bit with
background 0. Image values are kept in memory as float64 in [0, 1].
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, VersionError
from .geometry import TriangleMesh, save_mesh_ply
from .kinematics import KinematicChain, chain_from_dict, chain_to_dict, forward_kinematics
from .raster import Camera, Rasterizer, RasterConfig
from .splatmesh import SH_C0, SurfelSet, WorldGaussians, bind_to_world, save_splat_ply

MANIFEST_VERSION = 1
TRAIN_FRACTION = 0.8


@dataclass
class Frame:
    name: str
    camera: str
    rgb: np.ndarray
    mask: np.ndarray | None = None
    normals: np.ndarray | None = None
    joints: np.ndarray | None = None
    split: str = "train"


@dataclass
class Dataset:
    """Frames plus camera descriptions.

    ``cameras`` maps an id to either a posed :class:`Camera` or, for cameras
    mounted on ``chain``, the mount index (pose comes from the frame's joints).
    """

    cameras: dict
    frames: list
    chain: KinematicChain | None = None
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return [f for f in self.frames if f.split == name]

    @property
    def train(self) -> list:
        return self.split("train")

    @property
    def test(self) -> list:
        return self.split("test")

    def camera_for(self, frame: Frame, joints=None) -> Camera:
        """Nominal camera of ``frame``; ``joints`` overrides the recorded joint state."""
        c = self.cameras[frame.camera]
        if isinstance(c, Camera):
            return c
        q = frame.joints if joints is None else joints
        fk = forward_kinematics(self.chain, q)
        return fk.camera(self.chain, int(c))

    def camera_weight(self, frame: Frame) -> float:
        c = self.cameras[frame.camera]
        if isinstance(c, Camera) or self.chain is None:
            return 1.0
        return float(self.chain.cameras[int(c)].weight)


# --- PNG conventions ----------------------------------------------------------------

def _cv2():
    import cv2

    return cv2


def quantize(img, bits=8) -> np.ndarray:
    scale = (1 << bits) - 1
    return np.round(np.clip(img, 0.0, 1.0) * scale) / scale


def write_png(path, img, bits=8) -> None:
    cv2 = _cv2()
    scale = (1 << bits) - 1
    data = np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * scale)
    data = data.astype(np.uint16 if bits == 16 else np.uint8)
    if data.ndim == 3:
        data = data[:, :, ::-1]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.ascontiguousarray(data)):
        raise DatasetError(f"could not write image {path}")


def read_png(path) -> np.ndarray:
    cv2 = _cv2()
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing image file: {path}")
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise DatasetError(f"unreadable image file: {path}")
    scale = 65535.0 if data.dtype == np.uint16 else 255.0
    if data.ndim == 3:
        data = data[:, :, ::-1]
    return data.astype(np.float64) / scale


# --- manifest -----------------------------------------------------------------------

def _camera_entry(c):
    if isinstance(c, Camera):
        return {"intrinsics": c.intrinsics, "rotation": c.rotation.tolist(), "translation": c.translation.tolist()}
    return {"mount": int(c)}


def _manifest(ds: Dataset) -> dict:
    frames = []
    for f in ds.frames:
        e = {"name": f.name, "camera": f.camera, "split": f.split, "rgb": f"rgb/{f.name}.png"}
        if f.mask is not None:
            e["mask"] = f"mask/{f.name}.png"
        if f.normals is not None:
            e["normal"] = f"normal/{f.name}.png"
        if f.joints is not None:
            e["joints"] = [float(x) for x in f.joints]
        frames.append(e)
    doc = {"version": MANIFEST_VERSION, "cameras": {k: _camera_entry(c) for k, c in ds.cameras.items()},
           "frames": frames, "meta": ds.meta}
    if ds.chain is not None:
        doc["chain"] = chain_to_dict(ds.chain)
    return doc


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = [f.name for f in ds.frames]
    if len(set(names)) != len(names):
        raise DatasetError("frame names must be unique")
    for f in ds.frames:
        write_png(path / "rgb" / f"{f.name}.png", f.rgb)
        if f.mask is not None:
            write_png(path / "mask" / f"{f.name}.png", f.mask)
        if f.normals is not None:
            write_png(path / "normal" / f"{f.name}.png", f.normals, bits=16)
    text = json.dumps(_manifest(ds), indent=2, sort_keys=True)
    (path / "manifest.json").write_text(text + "\n")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise DatasetError(f"missing manifest: {mf}")
    try:
        doc = json.loads(mf.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed manifest {mf}: {e}") from e
    if not isinstance(doc, dict) or "version" not in doc:
        raise DatasetError(f"malformed manifest {mf}: no version field")
    if doc["version"] != MANIFEST_VERSION:
        raise VersionError(f"unsupported manifest version {doc['version']!r} (expected {MANIFEST_VERSION})")
    try:
        chain = chain_from_dict(doc["chain"]) if "chain" in doc else None
        cameras = {}
        for k, c in doc["cameras"].items():
            if "mount" in c:
                if chain is None:
                    raise DatasetError(f"camera {k} is mounted but the manifest has no chain")
                cameras[k] = int(c["mount"])
            else:
                cameras[k] = Camera(rotation=np.array(c["rotation"]), translation=np.array(c["translation"]),
                                    **c["intrinsics"])
        frames = []
        for e in doc["frames"]:
            if e["camera"] not in cameras:
                raise DatasetError(f"frame {e['name']} references unknown camera {e['camera']!r}")
            if e["split"] not in ("train", "test"):
                raise DatasetError(f"frame {e['name']}: unknown split {e['split']!r}")
            frames.append(Frame(
                e["name"], e["camera"], read_png(path / e["rgb"]),
                read_png(path / e["mask"]) if "mask" in e else None,
                read_png(path / e["normal"]) if "normal" in e else None,
                np.array(e["joints"], dtype=np.float64) if "joints" in e else None,
                e["split"]))
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"malformed manifest {mf}: {e!r}") from e
    return Dataset(cameras, frames, chain, doc.get("meta", {}))


# --- generation ---------------------------------------------------------------------

def hemisphere_directions(n: int, rng) -> np.ndarray:
    """Uniform over the solid angle of the upper hemisphere (z >= 0)."""
    z = rng.random(n)
    phi = rng.random(n) * 2.0 * np.pi
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def split_indices(n: int, rng) -> np.ndarray:
    """Boolean test mask with ``round(0.2 n)`` held-out entries."""
    n_test = int(round((1.0 - TRAIN_FRACTION) * n))
    test = np.zeros(n, dtype=bool)
    test[rng.permutation(n)[:n_test]] = True
    return test


def render_frame(gaussians: WorldGaussians, cam: Camera, name: str, camera_id: str, split="train",
                 joints=None, rasterizer: Rasterizer | None = None) -> Frame:
    r = rasterizer or Rasterizer(RasterConfig(check_records=False))
    out = r.render(gaussians, cam, ("rgb", "normals", "mask"))
    return Frame(name, camera_id, out.images["rgb"].copy(), out.images["mask"].copy(),
                 out.images["normals"].copy(), None if joints is None else np.asarray(joints, float), split)


def generate_dataset(gt_scene, n_views: int = 50, resolution: int = 128, rng_seed: int = 0,
                     *, distance_factor: float = 2.5, fill: float = 0.8, center=None) -> Dataset:
    """Render a ground-truth scene from cameras on the upper hemisphere.

    ``gt_scene`` is :class:`WorldGaussians` or a ``(mesh, surfels)`` pair.
    Cameras sit at ``distance_factor`` times the largest bounding-box side
    from the center; focal length makes the bounding sphere span ``fill`` of
    the image.
    """
    if n_views < 2:
        raise ValueError("need at least 2 views")
    g = gt_scene if isinstance(gt_scene, WorldGaussians) else bind_to_world(*gt_scene)
    lo, hi = g.means.min(axis=0), g.means.max(axis=0)
    c = (lo + hi) / 2.0 if center is None else np.asarray(center, dtype=np.float64)
    extent = float((hi - lo).max())
    radius = float(np.linalg.norm(g.means - c, axis=1).max())
    dist = distance_factor * extent
    f = fill * (resolution / 2.0) * np.sqrt(dist**2 - radius**2) / radius
    intr = dict(fx=f, fy=f, cx=resolution / 2.0, cy=resolution / 2.0, width=resolution, height=resolution)
    rng = np.random.default_rng(rng_seed)
    dirs = hemisphere_directions(n_views, rng)
    test = split_indices(n_views, rng)
    raster = Rasterizer(RasterConfig(check_records=False))
    cameras, frames = {}, []
    for i, d in enumerate(dirs):
        cid = f"view{i:03d}"
        cam = Camera.look_at(c + dist * d, c, **intr)
        cameras[cid] = cam
        frames.append(render_frame(g, cam, f"{i:04d}", cid, "test" if test[i] else "train", rasterizer=raster))
    meta = {"generator": "hemisphere", "n_views": n_views, "resolution": resolution, "seed": rng_seed,
            "center": c.tolist(), "extent": extent, "distance": dist}
    return Dataset(cameras, frames, None, meta)


# --- export -------------------------------------------------------------------------

def bake_vertex_colors(mesh: TriangleMesh, surfels: SurfelSet, return_diagnostics: bool = False):
    """Per-vertex RGB from degree-0 Gaussian colors on incident faces.

    Weights are ``o * exp(-|mu - v|^2 / h^2)`` with ``h`` the mean length of
    edges at the vertex, normalized per vertex.
    """
    g = bind_to_world(mesh, surfels)
    rgb = np.clip(0.5 + SH_C0 * g.sh_coeffs[:, 0, :], 0.0, 1.0)
    nv = mesh.n_vertices
    e = mesh.edges
    lengths = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    deg = np.bincount(e.ravel(), minlength=nv)
    h = np.bincount(e.ravel(), weights=np.repeat(lengths, 2), minlength=nv) / np.maximum(deg, 1)
    # every (gaussian, incident vertex) pair
    verts = mesh.faces[surfels.face_id]  # (N, 3)
    gi = np.repeat(np.arange(len(g)), 3)
    vi = verts.ravel()
    d2 = np.sum((g.means[gi] - mesh.vertices[vi]) ** 2, axis=1)
    w = g.opacities[gi] * np.exp(-d2 / np.maximum(h[vi], 1e-300) ** 2)
    wsum = np.bincount(vi, weights=w, minlength=nv)
    col = np.stack([np.bincount(vi, weights=w * rgb[gi, c], minlength=nv) for c in range(3)], axis=1)
    empty = wsum <= 0
    out = np.full((nv, 3), 0.5)
    out[~empty] = col[~empty] / wsum[~empty, None]
    if return_diagnostics:
        return out, {"n_fallback": int(empty.sum())}
    return out


def export_asset(mesh: TriangleMesh, surfels: SurfelSet, path) -> dict:
    """Write ``mesh.ply`` (baked vertex colors), ``splats.ply`` and ``asset.json`` into ``path``."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        colors, diag = bake_vertex_colors(mesh, surfels, return_diagnostics=True)
        save_mesh_ply(path / "mesh.ply", mesh, colors, comments=["vertex colors baked from splats"])
        save_splat_ply(path / "splats.ply", bind_to_world(mesh, surfels))
        info = {"mesh": "mesh.ply", "splats": "splats.ply", "n_vertices": mesh.n_vertices,
                "n_faces": mesh.n_faces, "n_gaussians": len(surfels), "color_baking": "per-vertex",
                "n_fallback_vertices": diag["n_fallback"]}
        (path / "asset.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise DatasetError(f"could not export asset to {path}: {e}") from e
    return info


def perturb_cameras(ds: Dataset, degrees: float, rng_seed: int, split: str | None = "train") -> Dataset:
    """Copy of ``ds`` whose posed cameras are rotated by ``degrees`` about random axes.

    Images are untouched, so the stored poses become wrong by exactly that
    angle; cameras used only by other splits are left alone.
    """
    rng = np.random.default_rng([rng_seed, 5])
    used = {f.camera for f in ds.frames if split is None or f.split == split}
    cams = {}
    for cid in sorted(ds.cameras):
        c = ds.cameras[cid]
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        if isinstance(c, Camera) and cid in used:
            c = c.perturbed(np.deg2rad(degrees) * axis)
        cams[cid] = c
    meta = dict(ds.meta, camera_noise_deg=degrees, camera_noise_seed=rng_seed)
    return Dataset(cams, list(ds.frames), ds.chain, meta)


def generate_robot_dataset(scene, q_frames, rng_seed: int = 0) -> Dataset:
    """Render every chain camera at every joint state; all frames are training frames."""
    from .assets import pose_gaussians

    chain = scene.chain
    q_frames = np.atleast_2d(np.asarray(q_frames, dtype=np.float64))
    raster = Rasterizer(RasterConfig(check_records=False))
    local = scene.local_gaussians()
    cameras = {c.name: k for k, c in enumerate(chain.cameras)}
    frames = []
    for t, q in enumerate(q_frames):
        fk = forward_kinematics(chain, q)
        g = pose_gaussians(scene, fk, local)
        for k, c in enumerate(chain.cameras):
            frames.append(render_frame(g, fk.camera(chain, k), f"t{t:03d}_{c.name}", c.name, "train",
                                       joints=q, rasterizer=raster))
    meta = {"generator": "robot", "seed": rng_seed, "n_states": len(q_frames)}
    return Dataset(cameras, frames, chain, meta)
