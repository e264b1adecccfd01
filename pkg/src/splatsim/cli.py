"""Command-line entry point: ``splatsim {gen,reconstruct,calibrate,eval,export,render}``.

Each command reads a JSON config (``--config``), applies flag overrides,
validates everything before touching the output directory, then writes
its artifacts plus the resolved ``config.json`` into ``--out``.

Exit codes: 0 success, 1 usage/config/data error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError, NonFiniteError

log = logging.getLogger("splatsim")

SCENES = ("ellipsoid", "bumpy", "robot")


class UsageError(Exception):
    pass


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"malformed config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be a JSON object")
    return doc


def _need(cfg, key, kind=str):
    if key not in cfg:
        raise UsageError(f"config is missing {key!r}")
    if not isinstance(cfg[key], kind):
        raise UsageError(f"config key {key!r} has the wrong type")
    return cfg[key]


def _dump(path, doc):
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _prepare_out(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands ------------------------------------------------------------------------
# Each ``plan_*`` validates and returns a callable doing the work, so that
# nothing is written when the configuration is bad.

def plan_gen(cfg, args):
    from .assets import bumpy_sphere_asset, ellipsoid_asset, robot_scene, robot_trajectory
    from .scene_io import generate_dataset, generate_robot_dataset, perturb_cameras, save_dataset

    scene = cfg.get("scene", "ellipsoid")
    if scene not in SCENES:
        raise UsageError(f"unknown scene {scene!r}; choose from {', '.join(SCENES)}")
    n_views = int(cfg.get("n_views", 50))
    res = int(cfg.get("resolution", 128))
    seed = int(cfg.get("seed", 0))
    scene_seed = int(cfg.get("scene_seed", 0))
    noise = float(cfg.get("camera_noise_deg", 0.0))
    n_states = int(cfg.get("n_states", 4))
    if n_views < 2 or res < 16 or n_states < 1:
        raise UsageError("need n_views >= 2, resolution >= 16, n_states >= 1")

    def run(out):
        from .geometry import save_mesh_ply
        from .splatmesh import save_splat_ply

        if scene == "robot":
            rs = robot_scene(res, scene_seed)
            ds = generate_robot_dataset(rs, robot_trajectory(rs.chain, n_states, seed), seed)
            ds.meta.update({"scene": "robot", "scene_seed": scene_seed, "resolution": res})
            save_dataset(ds, out)
            return {"n_frames": len(ds.frames)}
        asset = (ellipsoid_asset if scene == "ellipsoid" else bumpy_sphere_asset)(seed=scene_seed)
        ds = generate_dataset((asset.mesh, asset.surfels), n_views, res, seed)
        if noise > 0:
            ds = perturb_cameras(ds, noise, seed)
        ds.meta.update({"scene": scene, "scene_seed": scene_seed, "gt_mesh": "gt_mesh.ply",
                        "gt_splats": "gt_splats.ply"})
        save_dataset(ds, out)
        save_mesh_ply(out / "gt_mesh.ply", asset.mesh)
        save_splat_ply(out / "gt_splats.ply", asset.gaussians())
        return {"n_frames": len(ds.frames), "n_train": len(ds.train), "n_test": len(ds.test)}

    return run


def plan_reconstruct(cfg, args):
    from .optim import config_to_dict, reconstruct, reconstruct_config_from_dict, save_params, write_history_csv
    from .scene_io import load_dataset

    ds_path = _need(cfg, "dataset")
    rc = dict(cfg.get("reconstruct", {}))
    if args.steps is not None:
        rc["steps"] = args.steps
    if args.seed is not None:
        rc["seed"] = args.seed
    if args.tau is not None:
        rc["smask_tau"] = args.tau
    if args.literal_smask:
        rc["smask_literal"] = True
    rcfg = reconstruct_config_from_dict(rc)
    ds = load_dataset(ds_path)
    cfg["reconstruct"] = config_to_dict(rcfg)

    def run(out):
        from .geometry import save_mesh_ply

        t0 = time.time()
        res = reconstruct(ds, rcfg, progress=lambda r: log.info("step %d loss %.5g", r["step"], r["total"]))
        cams = sorted({f.camera for f in ds.train})
        save_params(out / "params.npz", res.base_mesh, res.params, cams)
        save_mesh_ply(out / "mesh.ply", res.mesh)
        write_history_csv(out / "history.csv", res.history)
        return {"best_step": res.best_step, "seconds": time.time() - t0, "events": res.events,
                "final_full_loss": res.history[-1].get("full_total")}

    return run


def plan_calibrate(cfg, args):
    from .assets import robot_scene
    from .kinematics import add_joint_noise
    from .optim import calibrate, calibrate_config_from_dict, config_to_dict, write_history_csv
    from .scene_io import load_dataset

    ds_path = _need(cfg, "dataset")
    sigma = float(args.sigma if args.sigma is not None else cfg.get("sigma", 0.01))
    if sigma < 0:
        raise UsageError("sigma must be >= 0")
    cc = dict(cfg.get("calibrate", {}))
    if args.steps is not None:
        cc["iterations"] = args.steps
    if args.seed is not None:
        cc["seed"] = args.seed
    ccfg = calibrate_config_from_dict(cc)
    ds = load_dataset(ds_path)
    if ds.meta.get("scene") != "robot":
        raise UsageError("calibrate needs a robot dataset (gen with scene=robot)")
    cfg.update({"sigma": sigma, "calibrate": config_to_dict(ccfg)})

    def run(out):
        from .metrics import metrics_report, write_metrics

        scene = robot_scene(int(ds.meta["resolution"]), int(ds.meta["scene_seed"]))
        q_gt = []
        for f in ds.frames:
            if not any(np.array_equal(f.joints, q) for q in q_gt):
                q_gt.append(f.joints)
        q_gt = np.array(q_gt)
        q_noisy = add_joint_noise(q_gt, sigma, ccfg.seed)
        res = calibrate(ds, scene, q_noisy, ccfg, q_gt=q_gt)
        write_history_csv(out / "history.csv", res.history)
        np.savetxt(out / "q_est.txt", res.q_est)
        write_metrics(out / "metrics.json", metrics_report(
            tcp_error_mm=res.tcp_error_mm[res.best_iteration], initial_tcp_error_mm=res.tcp_error_mm[0],
            final_tcp_error_mm=res.tcp_error_mm[-1], best_iteration=res.best_iteration, sigma=sigma))
        return {"initial_tcp_error_mm": res.tcp_error_mm[0], "tcp_error_mm": res.tcp_error_mm[res.best_iteration],
                "final_tcp_error_mm": res.tcp_error_mm[-1]}

    return run


def _load_run(run_dir):
    from .optim import load_params
    from .splatmesh import bind_to_world

    p = Path(run_dir) / "params.npz"
    if not p.is_file():
        raise UsageError(f"no params.npz in run directory {run_dir}")
    base, params, cams = load_params(p)
    d = params.mesh_deformation
    mesh = base.with_vertices(base.vertices + d.vertex_deltas + d.global_translation)
    return mesh, params.surfels, bind_to_world(mesh, params.surfels)


def plan_eval(cfg, args):
    from .scene_io import load_dataset

    ds = load_dataset(_need(cfg, "dataset"))
    run_dir = _need(cfg, "run")
    mesh, surfels, g = _load_run(run_dir)
    steps = int(cfg.get("align_steps", 100))
    n_points = int(cfg.get("n_points", 10000))
    masked = bool(cfg.get("masked_psnr", False))
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))

    def run(out):
        from .geometry import load_mesh_ply
        from .losses import Observation
        from .metrics import align_eval_cameras, mesh_chamfer_mm2, metrics_report, write_metrics

        extra = {}
        cd = None
        gt_name = ds.meta.get("gt_mesh")
        if gt_name:
            gt_mesh, _ = load_mesh_ply(Path(cfg["dataset"]) / gt_name)
            cd = mesh_chamfer_mm2(mesh, gt_mesh, n_points, seed)
        test = ds.test
        psnrs = ssims = None
        if test:
            al = align_eval_cameras(g, [ds.camera_for(f) for f in test],
                                    [Observation(f.camera, f.rgb, f.mask) for f in test], steps=steps, masked=masked)
            psnrs, ssims = al.psnr_after, al.ssim_after
            extra["psnr_before_alignment_db"] = float(np.mean(al.psnr_before))
        rep = metrics_report(cd_mm2=cd, psnr_db=psnrs, ssim_vals=ssims, **extra)
        write_metrics(out / "metrics.json", rep)
        return {k: rep[k] for k in ("cd_mm2",) if k in rep}

    return run


def plan_export(cfg, args):
    run_dir = _need(cfg, "run")
    mesh, surfels, _ = _load_run(run_dir)

    def run(out):
        from .scene_io import export_asset

        return export_asset(mesh, surfels, out / "asset")

    return run


def plan_render(cfg, args):
    from .scene_io import load_dataset

    asset = Path(_need(cfg, "asset"))
    splats = asset / "splats.ply" if asset.is_dir() else asset
    if not splats.is_file():
        raise UsageError(f"no splat PLY at {splats}")
    ds = load_dataset(_need(cfg, "dataset"))
    names = cfg.get("frames")
    frames = ds.frames if names is None else [f for f in ds.frames if f.name in set(names)]
    if names is not None and len(frames) != len(set(names)):
        raise UsageError("some requested frames are not in the dataset")

    def run(out):
        from .metrics import psnr, write_metrics
        from .raster import Rasterizer, RasterConfig
        from .scene_io import write_png
        from .splatmesh import load_splat_ply

        g = load_splat_ply(splats)
        r = Rasterizer(RasterConfig(check_records=False))
        per = {}
        for f in frames:
            img = r.render(g, ds.camera_for(f), "rgb").images["rgb"]
            write_png(out / "render" / f"{f.name}.png", img)
            per[f.name] = psnr(img, f.rgb)
        vals = [min(v, 1e308) for v in per.values()]
        write_metrics(out / "metrics.json", {"psnr_db": {"per_frame": per, "mean": float(np.mean(vals)) if vals else None}})
        return {"n_rendered": len(frames)}

    return run


PLANS = {"gen": plan_gen, "reconstruct": plan_reconstruct, "calibrate": plan_calibrate, "eval": plan_eval,
         "export": plan_export, "render": plan_render}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatsim", description="Differentiable splat-mesh reconstruction and calibration.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in PLANS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int, help="worker threads (default: available cores)")
        s.add_argument("--out", required=True, help="run/output directory")
        s.add_argument("--steps", type=int)
        s.add_argument("--sigma", type=float, help="joint noise (radians) for calibrate")
        s.add_argument("--tau", type=float, help="soft-mask falloff in pixels")
        s.add_argument("--literal-smask", action="store_true", help="use the squared-distance mask target")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 1
        import numba

        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        cfg = _read_config(args.config)
        if args.seed is not None and args.command == "gen":
            cfg["seed"] = args.seed
        run = PLANS[args.command](cfg, args)
    except (UsageError, ConfigError, DatasetError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    out = _prepare_out(args.out)
    _dump(out / "config.json", {"command": args.command, "config": cfg,
                                "threads": args.threads or os.cpu_count(), "argv": list(argv or sys.argv[1:])})
    try:
        summary = run(out) or {}
    except NonFiniteError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError, DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
