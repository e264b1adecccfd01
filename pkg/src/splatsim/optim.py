"""Adam over named parameter groups and the two optimization pipelines.

``reconstruct`` fits mesh deformation, bound Gaussians and per-camera
rotation deltas to a dataset. ``calibrate`` alternates a color step (L1)
and a pose step (weighted 1 - SSIM) over joint offsets and fixed-camera
rotation deltas of a robot scene.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .assets import RobotScene, SplatAsset, init_surfels, pose_gaussians, pose_gaussians_vjp
from .errors import ConfigError, NonFiniteError, ShapeError
from .geometry import MeshDeformation, TriangleMesh, make_icosphere
from .kinematics import fk_vjp, forward_kinematics
from .metrics import tcp_error
from .losses import LossWeights, Observation, frame_loss, photometric_l1, ssim_vjp, total_loss
from .raster import Rasterizer, RasterConfig, hat, so3_exp
from .splatmesh import SurfelSet, WorldGaussians, bind_to_world, bind_to_world_vjp

log = logging.getLogger(__name__)

GAUSSIAN_GROUPS = ("bary_logits", "log_scales", "normal_log_scale", "sh", "opacity")
DEFAULT_LR = {"bary_logits": 5e-4, "log_scales": 5e-4, "normal_log_scale": 5e-4, "sh": 5e-4, "opacity": 5e-4,
              "vertex_deltas": 1e-4, "translation": 1e-3, "camera_rot": 1e-4, "joint_offsets": 5e-4}


# --- Adam -----------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: dict
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    frozen: frozenset = frozenset()


def adam_step(state: AdamState, params: dict, grads: dict):
    """One bias-corrected Adam update. Returns ``(state, new_params)``.

    Groups that are frozen, have no learning rate, or have no gradient keep
    the identical array object.
    """
    for name, g in grads.items():
        if name in params and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in group {name!r}", group=name, step=state.t)
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    out = dict(params)
    for name, p in params.items():
        if name in state.frozen or name not in grads or state.lr.get(name, 0.0) == 0.0:
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, expected {np.shape(p)}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        out[name] = p - state.lr[name] * mhat / (np.sqrt(vhat) + state.eps)
    return state, out


# --- parameters ----------------------------------------------------------------------

@dataclass
class SceneParams:
    mesh_deformation: MeshDeformation
    surfels: SurfelSet
    camera_rot_deltas: np.ndarray  # (C, 3)
    joint_offsets: np.ndarray

    def groups(self) -> dict:
        s = self.surfels
        g = {"vertex_deltas": self.mesh_deformation.vertex_deltas,
             "translation": self.mesh_deformation.global_translation,
             "bary_logits": s.bary_logits, "log_scales": s.tangent_log_scales, "sh": s.sh_coeffs,
             "camera_rot": self.camera_rot_deltas, "joint_offsets": self.joint_offsets}
        if not s.fixed_opacity:
            g["opacity"] = s.opacity_logit
        if s.normal_log_scale is not None:
            g["normal_log_scale"] = s.normal_log_scale
        return g

    def with_groups(self, g: dict) -> "SceneParams":
        s = self.surfels
        surf = SurfelSet(s.face_id, g["bary_logits"], g["log_scales"], g["sh"],
                         g.get("opacity", s.opacity_logit), s.fixed_opacity, g.get("normal_log_scale"))
        return SceneParams(MeshDeformation(g["vertex_deltas"], g["translation"]), surf,
                           g["camera_rot"], g["joint_offsets"])

    def copy(self) -> "SceneParams":
        return self.with_groups({k: np.array(v, copy=True) for k, v in self.groups().items()})


def so3_right_jacobian(phi) -> np.ndarray:
    """``J_r`` with ``exp(phi + d) ~= exp(phi) exp(J_r(phi) d)``."""
    phi = np.asarray(phi, dtype=np.float64)
    th = np.linalg.norm(phi)
    k = hat(phi)
    if th < 1e-6:
        return np.eye(3) - 0.5 * k + k @ k / 6.0
    return np.eye(3) - (1.0 - np.cos(th)) / th**2 * k + (th - np.sin(th)) / th**3 * (k @ k)


# --- configuration -------------------------------------------------------------------

@dataclass
class InitConfig:
    subdivisions: int = 3
    radius: float = 0.05
    center: tuple = (0.0, 0.0, 0.0)
    gaussians_per_face: float = 12
    sh_degree: int = 0
    opacity: float = 0.9


@dataclass
class ReconstructConfig:
    steps: int = 40000
    seed: int = 0
    lr: dict = field(default_factory=dict)
    weights: LossWeights = field(default_factory=LossWeights)
    frozen: tuple = ()
    opacity_mode: str = "optimize"  # or "clamped"
    surfel_clamp: bool = True
    smask_tau: float = 25.0
    smask_literal: bool = False
    photo_masked: bool = True
    batch_frames: int = 1
    log_every: int = 100
    eval_every: int = 1000
    divergence_factor: float = 10.0
    # exponential decay of these groups to ``lr_final_factor`` of their rate at the last step
    lr_final_factor: float = 0.1
    lr_decay_groups: tuple = ("vertex_deltas", "translation", "camera_rot")
    init: InitConfig = field(default_factory=InitConfig)

    def learning_rates(self) -> dict:
        lr = dict(DEFAULT_LR)
        for k, v in self.lr.items():
            if k == "gaussians":
                for gname in GAUSSIAN_GROUPS:
                    lr[gname] = float(v)
            elif k not in DEFAULT_LR:
                raise ConfigError(f"unknown learning-rate group {k!r}")
            else:
                lr[k] = float(v)
        return lr

    def validate(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.opacity_mode not in ("optimize", "clamped"):
            raise ConfigError(f"opacity_mode must be 'optimize' or 'clamped', got {self.opacity_mode!r}")
        if self.batch_frames < 1 or self.log_every < 1 or self.eval_every < 1:
            raise ConfigError("batch_frames, log_every and eval_every must be >= 1")
        if not self.smask_tau > 0:
            raise ConfigError("smask_tau must be > 0")
        if not 0 < self.lr_final_factor <= 1:
            raise ConfigError("lr_final_factor must be in (0, 1]")
        unknown = set(self.lr_decay_groups) - set(DEFAULT_LR)
        if unknown:
            raise ConfigError(f"unknown lr_decay_groups {sorted(unknown)}")
        self.learning_rates()
        return self


@dataclass
class CalibrateConfig:
    iterations: int = 600
    seed: int = 0
    color_lr: float = 5e-3
    joint_lr: float = 5e-4
    camera_lr: float = 1e-4
    color_warmup: int = 150
    color_steps: int = 1  # per alternation
    pose_steps: int = 1
    optimize_cameras: bool = True
    log_every: int = 10


def _from_dict(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name: f for f in fields(cls)}
    unknown = set(doc) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {}
    for k, v in doc.items():
        if k == "weights":
            try:
                v = LossWeights(**v)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{where}.weights: {e}") from e
        elif k == "init":
            v = _from_dict(InitConfig, v, f"{where}.init")
        elif k in ("frozen", "center", "lr_decay_groups"):
            v = tuple(v)
        kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def reconstruct_config_from_dict(doc: dict) -> ReconstructConfig:
    return _from_dict(ReconstructConfig, doc, "reconstruct").validate()


def calibrate_config_from_dict(doc: dict) -> CalibrateConfig:
    return _from_dict(CalibrateConfig, doc, "calibrate")


def config_to_dict(cfg) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    if "init" in d:
        d["init"]["center"] = list(d["init"]["center"])
    return d


def write_history_csv(path, history: list) -> None:
    cols = ["step", "total", "photo", "mask", "smask", "normal", "laplacian", "edge", "full_total", "tcp_error_mm"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for h in history:
            w.writerow([h.get(c, "") for c in cols])


# --- reconstruction ------------------------------------------------------------------

@dataclass
class ReconstructResult:
    mesh: TriangleMesh
    surfels: SurfelSet
    camera_deltas: dict
    history: list
    params: SceneParams
    base_mesh: TriangleMesh
    best_step: int
    events: list


def initial_params(config: ReconstructConfig, camera_ids, base_mesh=None, surfels=None):
    ic = config.init
    mesh = base_mesh if base_mesh is not None else make_icosphere(ic.subdivisions, ic.radius, ic.center)
    if surfels is None:
        surfels = init_surfels(mesh, ic.gaussians_per_face, config.seed, sh_degree=ic.sh_degree,
                               opacity=None if config.opacity_mode == "clamped" else ic.opacity,
                               clamp=config.surfel_clamp)
    params = SceneParams(MeshDeformation.zeros(mesh.n_vertices), surfels.copy(),
                         np.zeros((len(camera_ids), 3)), np.zeros(0))
    return mesh, params


def _modalities(weights: LossWeights, obs: Observation):
    mods = ["rgb"]
    if obs.mask is not None and (weights.mask > 0 or weights.smask > 0):
        mods.append("mask")
    if obs.normal_map is not None and weights.normal > 0:
        mods.append("normals")
    return tuple(mods)


def frame_observation(dataset, frame) -> Observation:
    return Observation(frame.camera, frame.rgb, frame.mask, frame.normals, dataset.camera_weight(frame))


class _Objective:
    """Loss and gradient of the reconstruction objective for a subset of frames."""

    def __init__(self, dataset, frames, base_mesh, camera_ids, config: ReconstructConfig, rasterizer):
        self.ds = dataset
        self.frames = frames
        self.obs = [frame_observation(dataset, f) for f in frames]
        self.nominal = [dataset.camera_for(f) for f in frames]
        self.cam_index = {c: i for i, c in enumerate(camera_ids)}
        self.base = base_mesh
        self.cfg = config
        self.r = rasterizer

    def mesh(self, p: SceneParams) -> TriangleMesh:
        d = p.mesh_deformation
        return self.base.with_vertices(self.base.vertices + d.vertex_deltas + d.global_translation)

    def __call__(self, p: SceneParams, which, grad=True):
        cfg = self.cfg
        w = cfg.weights
        mesh = self.mesh(p)
        g = bind_to_world(mesh, p.surfels)
        cot = g.zeros_like() if grad else None
        g_cam = np.zeros_like(p.camera_rot_deltas)
        total, terms = 0.0, {}
        for i in which:
            obs = self.obs[i]
            ci = self.cam_index[obs.camera]
            delta = p.camera_rot_deltas[ci]
            cam = self.nominal[i].perturbed(delta)
            mods = _modalities(w, obs)
            out = self.r.render(g, cam, mods)
            v, t, c = frame_loss(out.images, obs, w, tau=cfg.smask_tau, literal=cfg.smask_literal,
                                 photo_masked=cfg.photo_masked)
            total += obs.weight * v
            for k, x in t.items():
                terms[k] = terms.get(k, 0.0) + obs.weight * x
            if grad:
                rg = self.r.render_vjp(g, cam, out.record, {k: obs.weight * x for k, x in c.items()})
                for name in ("means", "rotations", "scales", "sh_coeffs", "opacities"):
                    getattr(cot, name).__iadd__(getattr(rg.gaussians, name))
                g_cam[ci] += so3_right_jacobian(delta).T @ rg.cam_rotation
        reg = total_loss([], [], w, mesh)
        total += sum(getattr(w, k) * v for k, v in reg.terms.items())
        terms.update(reg.terms)
        if not grad:
            return total, terms, None
        sg = bind_to_world_vjp(mesh, p.surfels, cot)
        g_vert = sg.vertices + reg.mesh_grad
        grads = {"vertex_deltas": g_vert, "translation": g_vert.sum(axis=0), "bary_logits": sg.bary_logits,
                 "log_scales": sg.tangent_log_scales, "sh": sg.sh_coeffs, "camera_rot": g_cam}
        if not p.surfels.fixed_opacity:
            grads["opacity"] = sg.opacity_logit
        if sg.normal_log_scale is not None:
            grads["normal_log_scale"] = sg.normal_log_scale
        return total, terms, grads


def reconstruct(dataset, config: ReconstructConfig | None = None, *, base_mesh=None, init=None,
                camera_ids=None, frames=None, raster_config: RasterConfig | None = None,
                progress=None) -> ReconstructResult:
    """Fit a deformable splat mesh to the training frames of ``dataset``.

    ``init`` is an optional ``(base_mesh, SceneParams)`` pair; otherwise the
    configured icosphere is used. Returns the best iterate according to the
    periodic full training-loss evaluations (the final step is always
    evaluated).
    """
    cfg = (config or ReconstructConfig()).validate()
    frames = dataset.train if frames is None else frames
    if not frames:
        raise ValueError("dataset has no training frames")
    if camera_ids is None:
        camera_ids = sorted({f.camera for f in frames})
    if init is not None:
        base_mesh, params = init[0], init[1].copy()
        if params.camera_rot_deltas.shape != (len(camera_ids), 3):
            params.camera_rot_deltas = np.zeros((len(camera_ids), 3))
    else:
        base_mesh, params = initial_params(cfg, camera_ids, base_mesh)
    raster = Rasterizer(raster_config or RasterConfig(check_records=False))
    obj = _Objective(dataset, frames, base_mesh, camera_ids, cfg, raster)

    lr = cfg.learning_rates()
    frozen = frozenset(cfg.frozen) | {"joint_offsets"}
    state = AdamState(lr=dict(lr), frozen=frozen)
    base_lr = dict(lr)
    rng = np.random.default_rng(cfg.seed)
    history, events = [], []
    all_idx = np.arange(len(frames))

    def full_eval(p):
        v, t, _ = obj(p, all_idx, grad=False)
        return v

    best = (np.inf, -1, None)
    initial = None
    guard_used = False
    groups = params.groups()
    for step in range(cfg.steps + 1):
        p = params.with_groups(groups)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            full = full_eval(p)
            if not np.isfinite(full):
                raise NonFiniteError(f"non-finite loss at step {step}", step=step)
            if full < best[0]:
                best = (full, step, p.copy())
            if history and history[-1]["step"] == step:
                history[-1]["full_total"] = full
            else:
                history.append({"step": step, "full_total": full})
        if step == cfg.steps:
            break
        which = rng.choice(all_idx, size=min(cfg.batch_frames, len(all_idx)), replace=False)
        loss, terms, grads = obj(p, which)
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite loss at step {step}", step=step)
        if initial is None:
            initial = loss
        elif not guard_used and loss > cfg.divergence_factor * initial:
            guard_used = True
            for k in base_lr:
                base_lr[k] *= 0.5
            events.append({"step": step, "event": "divergence_guard", "loss": loss})
            log.warning("loss %.4g exceeded %.0fx initial at step %d; halving learning rates",
                        loss, cfg.divergence_factor, step)
        if step % cfg.log_every == 0:
            row = {"step": step, "total": loss, **terms}
            if history and history[-1]["step"] == step:
                history[-1].update(row)
            else:
                history.append(row)
            if progress:
                progress(row)
        try:
            decay = cfg.lr_final_factor ** (step / max(cfg.steps - 1, 1))
            state.lr = {k: v * decay if k in cfg.lr_decay_groups else v for k, v in base_lr.items()}
            state, groups = adam_step(state, groups, grads)
        except NonFiniteError as e:
            e.step = step
            raise
    _, best_step, best_p = best
    mesh = obj.mesh(best_p)
    deltas = {c: best_p.camera_rot_deltas[i].copy() for i, c in enumerate(camera_ids)}
    return ReconstructResult(mesh, best_p.surfels, deltas, history, best_p, base_mesh, best_step, events)


# --- calibration ---------------------------------------------------------------------

@dataclass
class CalibrateResult:
    q_est: np.ndarray  # (F, J)
    camera_deltas: dict
    tcp_error_mm: list  # per iteration, index 0 = initial
    best_iteration: int
    history: list
    colors: list  # per part sh coefficients


def calibrate(dataset, scene: RobotScene, q_noisy, config: CalibrateConfig | None = None, *, q_gt=None,
              raster_config: RasterConfig | None = None, progress=None) -> CalibrateResult:
    """Alternate color fitting and pose refinement on a robot dataset.

    Frames are grouped by joint state; ``q_noisy[k]`` is the measured state of
    group ``k`` (frames of one time step share a state). Fixed cameras (mounted
    on joint-free bodies) get rotation deltas; the others are driven by the
    joints only unless their mount sets ``perturb_mount``.
    """
    cfg = config or CalibrateConfig()
    chain = scene.chain
    q_noisy = np.atleast_2d(np.asarray(q_noisy, dtype=np.float64))
    frames = dataset.frames
    if not frames:
        raise ValueError("dataset has no frames")
    if any(f.joints is None for f in frames):
        raise ValueError("calibration frames must carry joint states")
    if not chain.tcps:
        raise ValueError("chain defines no TCP site")
    states = []
    group_of = []
    for f in frames:
        for k, s in enumerate(states):
            if np.array_equal(s, f.joints):
                group_of.append(k)
                break
        else:
            states.append(f.joints)
            group_of.append(len(states) - 1)
    if q_noisy.shape != (len(states), chain.n_joints):
        raise ShapeError(f"q_noisy must be ({len(states)}, {chain.n_joints}), got {q_noisy.shape}")
    if q_gt is not None:
        q_gt = np.atleast_2d(np.asarray(q_gt, dtype=np.float64))

    mount_of = [int(dataset.cameras[f.camera]) for f in frames]
    # cameras with rotation deltas: mounted on bodies with no revolute ancestor, or flagged
    moving = {i for i in range(len(chain.bodies))
              if any(chain._joint_of_body[a] >= 0 for a in chain.ancestors(i))}
    perturbable = [k for k, c in enumerate(chain.cameras) if c.body not in moving or c.perturb_mount]
    cam_slot = {k: i for i, k in enumerate(perturbable)}

    raster = Rasterizer(raster_config or RasterConfig(check_records=False))
    local = scene.local_gaussians()
    sh = [g.sh_coeffs.copy() for g in local]
    for s in sh:
        s[:] = 0.0  # colors unknown: start gray
    offsets = np.zeros_like(q_noisy)
    cam_d = np.zeros((len(perturbable), 3))
    color_state = AdamState(lr={f"sh{i}": cfg.color_lr for i in range(len(sh))})
    pose_state = AdamState(lr={"joint_offsets": cfg.joint_lr, "camera_rot": cfg.camera_lr if cfg.optimize_cameras else 0.0})
    rng = np.random.default_rng(cfg.seed)
    by_group = [[i for i, g in enumerate(group_of) if g == k] for k in range(len(states))]
    weights = np.array([chain.cameras[m].weight for m in mount_of])

    def posed(k, q):
        fk = forward_kinematics(chain, q)
        cur = [type(g)(g.means, g.rotations, g.scales, s, g.opacities) for g, s in zip(local, sh)]
        return fk, cur, pose_gaussians(scene, fk, cur)

    def camera(fk, m):
        cam = fk.camera(chain, m)
        if m in cam_slot:
            cam = cam.perturbed(cam_d[cam_slot[m]])
        return cam

    def color_step(k):
        q = q_noisy[k] + offsets[k]
        fk, cur, g = posed(k, q)
        g_sh = np.zeros_like(g.sh_coeffs)
        loss = 0.0
        for i in by_group[k]:
            f, m = frames[i], mount_of[i]
            cam = camera(fk, m)
            out = raster.render(g, cam, "rgb")
            v, c = photometric_l1(out.images["rgb"], f.rgb)
            loss += weights[i] * v
            g_sh += raster.render_vjp(g, cam, out.record, weights[i] * c).gaussians.sh_coeffs
        grads, start = {}, 0
        for j, s in enumerate(sh):
            grads[f"sh{j}"] = g_sh[start:start + len(s), : s.shape[1]]
            start += len(s)
        nonlocal color_state
        color_state, new = adam_step(color_state, {f"sh{j}": s for j, s in enumerate(sh)}, grads)
        for j in range(len(sh)):
            sh[j] = new[f"sh{j}"]
        return loss

    def pose_step(k):
        nonlocal offsets, cam_d, pose_state
        q = q_noisy[k] + offsets[k]
        fk, cur, g = posed(k, q)
        body_cot = np.zeros((len(chain.bodies), 6))
        cam_cot = np.zeros((len(chain.cameras), 6))
        g_cam = np.zeros_like(cam_d)
        world_cot = g.zeros_like()
        loss = 0.0
        for i in by_group[k]:
            f, m = frames[i], mount_of[i]
            cam = camera(fk, m)
            out = raster.render(g, cam, "rgb")
            s, gs = ssim_vjp(out.images["rgb"], f.rgb, -weights[i])
            loss += weights[i] * (1.0 - s)
            rg = raster.render_vjp(g, cam, out.record, gs)
            for name in ("means", "rotations"):
                getattr(world_cot, name).__iadd__(getattr(rg.gaussians, name))
            cot6 = np.concatenate([rg.cam_rotation, rg.cam_translation])
            if m in cam_slot:
                d = cam_d[cam_slot[m]]
                g_cam[cam_slot[m]] += so3_right_jacobian(d).T @ rg.cam_rotation
                e = so3_exp(d)  # pull the tangent back to the unperturbed mount pose
                cot6 = np.concatenate([e @ cot6[:3], e @ cot6[3:]])
            cam_cot[m] += cot6
        bc, _ = pose_gaussians_vjp(scene, fk, cur, world_cot)
        body_cot += bc
        g_q = fk_vjp(chain, q, body_cot, cam_cot, None, fk=fk)
        g_off = np.zeros_like(offsets)
        g_off[k] = g_q
        pose_state, new = adam_step(pose_state, {"joint_offsets": offsets, "camera_rot": cam_d},
                                    {"joint_offsets": g_off, "camera_rot": g_cam})
        offsets, cam_d = new["joint_offsets"], new["camera_rot"]
        return loss

    def err():
        return tcp_error(chain, q_noisy + offsets, q_gt) if q_gt is not None else float("nan")

    errors = [err()]
    best = (errors[0], 0, offsets.copy(), cam_d.copy())
    history = []
    for it in range(cfg.color_warmup):
        color_step(rng.integers(len(states)))
    for it in range(1, cfg.iterations + 1):
        k = rng.integers(len(states))
        lc = [color_step(k) for _ in range(cfg.color_steps)][-1]
        lp = [pose_step(k) for _ in range(cfg.pose_steps)][-1]
        if not (np.isfinite(lc) and np.isfinite(lp)):
            raise NonFiniteError(f"non-finite loss at iteration {it}", step=it)
        e = err()
        errors.append(e)
        if q_gt is not None and e < best[0]:
            best = (e, it, offsets.copy(), cam_d.copy())
        if it % cfg.log_every == 0:
            row = {"step": it, "photo": lc, "total": lp, "tcp_error_mm": e}
            history.append(row)
            if progress:
                progress(row)
    if q_gt is None:
        best = (errors[-1], cfg.iterations, offsets, cam_d)
    _, best_it, off, cd = best
    deltas = {chain.cameras[k].name: cd[i].copy() for k, i in cam_slot.items()}
    return CalibrateResult(q_noisy + off, deltas, errors, best_it, history, sh)


# --- persistence ---------------------------------------------------------------------

def save_params(path, base_mesh: TriangleMesh, params: SceneParams, camera_ids) -> None:
    s = params.surfels
    arrays = {"base_vertices": base_mesh.vertices, "faces": base_mesh.faces,
              "vertex_deltas": params.mesh_deformation.vertex_deltas,
              "translation": params.mesh_deformation.global_translation,
              "face_id": s.face_id, "bary_logits": s.bary_logits, "log_scales": s.tangent_log_scales,
              "sh": s.sh_coeffs, "opacity_logit": s.opacity_logit, "fixed_opacity": np.array(s.fixed_opacity),
              "camera_rot": params.camera_rot_deltas, "camera_ids": np.array(list(camera_ids))}
    if s.normal_log_scale is not None:
        arrays["normal_log_scale"] = s.normal_log_scale
    np.savez(Path(path), **arrays)


def load_params(path):
    with np.load(Path(path)) as z:
        base = TriangleMesh(z["base_vertices"], z["faces"])
        s = SurfelSet(z["face_id"], z["bary_logits"], z["log_scales"], z["sh"], z["opacity_logit"],
                      bool(z["fixed_opacity"]), z["normal_log_scale"] if "normal_log_scale" in z else None)
        p = SceneParams(MeshDeformation(z["vertex_deltas"], z["translation"]), s, z["camera_rot"], np.zeros(0))
        return base, p, [str(c) for c in z["camera_ids"]]


def load_json(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
