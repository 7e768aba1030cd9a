"""Command-line surface: simulate -> train -> render -> eval, plus the
noise-robustness sweep and the finite-difference gradient check.

Exit codes: 0 success, 2 usage error (argparse), 3 malformed input data.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import pipeline
from .errors import DataError, EvaluationError
from .events import NoiseConfig
from .field import EncodingConfig, FieldConfig, load_checkpoint
from .io import (read_events, read_frame_bin, read_poses, read_run_config,
                 parse_pose_line, write_frame_bin, write_pgm16)
from .metrics import evaluate_frame, mean_report, write_report_csv
from .rendering import RenderSettings, render_image
from .scenes import GtFrame, scene_preset
from .training import TrainConfig, build_training_set, fit
from dataclasses import replace


def _add_simulate(sub):
    p = sub.add_parser("simulate", help="render an orbit and emit events + ground truth")
    p.add_argument("--scene", required=True, help="slab | sphere_plane | hdr_boxes")
    p.add_argument("--poses", type=int, default=60, help="orbit poses = training intervals")
    p.add_argument("--fps", type=int, default=240, help="simulated video frame rate")
    p.add_argument("--threshold", type=float, default=0.3, help="positive contrast threshold")
    p.add_argument("--threshold-neg", type=float, default=None,
                   help="negative threshold (default: -threshold)")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--noise-ratio", type=float, default=0.0, help="spurious events per signal event")
    p.add_argument("--jitter-sigma", type=float, default=0.0, help="per-pixel threshold jitter std")
    p.add_argument("--gt-steps", type=int, default=192, help="oracle samples per ray")
    p.add_argument("--novel", type=int, default=0, help="also write N held-out oracle views")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def _add_train(sub):
    p = sub.add_parser("train", help="fit a field to an event file")
    p.add_argument("--events", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--config", required=True, help="INI run configuration")
    p.add_argument("--seed", type=int, default=None, help="override [train] seed")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--out", required=True)


def _add_render(sub):
    p = sub.add_parser("render", help="render intensity/depth from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--pose", default=None, help="single pose `t tx ty tz qx qy qz qw`")
    p.add_argument("--poses", default=None, help="pose file; renders every line")
    p.add_argument("--out", required=True)


def _add_eval(sub):
    p = sub.add_parser("eval", help="score a checkpoint against oracle frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--gt", required=True, help="directory with poses.txt + frame_*.evf")
    p.add_argument("--out", default=None, help="per-view CSV report path")


def _add_sweep(sub):
    p = sub.add_parser("sweep-noise", help="retrain at several corruption ratios")
    p.add_argument("--events", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--gt", required=True, help="held-out oracle directory")
    p.add_argument("--ratios", required=True, help="comma-separated, e.g. 0,0.3,0.7")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="sweep CSV path")


def _add_gradcheck(sub):
    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)


def build_parser():
    parser = argparse.ArgumentParser(prog="evfield")
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (_add_simulate, _add_train, _add_render, _add_eval, _add_sweep, _add_gradcheck):
        add(sub)
    return parser


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _geometry_from_config(config):
    scene_name = config["scene"].get("name")
    if not scene_name:
        raise DataError("run config needs [scene] name")
    preset = scene_preset(scene_name)
    cam = config["camera"]
    width = cam.get("width", 64)
    height = cam.get("height", 64)
    intr = pipeline.make_intrinsics(width, height, cam.get("fov_deg", preset.fov_deg))
    near = cam.get("near", preset.near)
    far = cam.get("far", preset.far)
    from .scenes import builtin_scene
    background = config["scene"].get("background", builtin_scene(scene_name).background)
    return scene_name, preset, intr, near, far, background


def _train_config(config, seed_override=None):
    t = dict(config["train"])
    enc = EncodingConfig(l_x=t.pop("l_x", 10), l_d=t.pop("l_d", 4))
    fld = FieldConfig(depth=t.pop("depth", 8), width=t.pop("width", 256), encoding=enc)
    cfg = TrainConfig(field=fld, **t)
    if seed_override is not None:
        cfg = replace(cfg, seed=seed_override)
    return cfg


def _load_training_set(args, config):
    scene_name, preset, intr, near, far, background = _geometry_from_config(config)
    stream = read_events(args.events, width=intr.width, height=intr.height)
    times, poses = read_poses(args.poses)
    cfg = _train_config(config, getattr(args, "seed", None))
    tset = build_training_set(stream, times, poses, intr, near, far,
                              preset.aabb_center, preset.aabb_half, background,
                              noise_ratio=cfg.noise_injection_ratio, seed=cfg.seed)
    return cfg, tset, stream


def _settings_from_config(config, cfg):
    _, preset, intr, near, far, background = _geometry_from_config(config)
    return intr, RenderSettings(near, far, preset.aabb_center, preset.aabb_half,
                                background, cfg.n_coarse, cfg.n_fine)


def _load_gt_dir(gt_dir):
    times, poses = read_poses(os.path.join(gt_dir, "poses.txt"))
    frames = []
    for i, pose in enumerate(poses):
        chans = read_frame_bin(os.path.join(gt_dir, f"frame_{i:05d}.evf"))
        if len(chans) != 4:
            raise DataError(f"{gt_dir}/frame_{i:05d}.evf: expected 4 channels")
        frames.append(GtFrame(chans[0], chans[1], chans[2], chans[3], float(times[i]), pose))
    return poses, frames


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _write_run_ini(path, args, background):
    lines = [
        "[scene]", f"name = {args.scene}", f"background = {background}", "",
        "[camera]", f"width = {args.width}", f"height = {args.height}", "",
        "[sim]", f"intervals = {args.poses}", f"fps = {args.fps}",
        f"b_plus = {args.threshold}", f"b_minus = {args.threshold_neg}", "",
        "[train]", "depth = 4", "width = 128", "batch_rays = 128",
        "n_coarse = 32", "n_fine = 32", "iterations = 5000", f"seed = {args.seed}", "",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines))


def cmd_simulate(args):
    b_minus = args.threshold_neg if args.threshold_neg is not None else -args.threshold
    args.threshold_neg = b_minus
    jitter = NoiseConfig(ratio=0.0, threshold_jitter_sigma=args.jitter_sigma, seed=args.seed)
    ds = pipeline.simulate_orbit(args.scene, width=args.width, height=args.height,
                                 n_intervals=args.poses, fps=args.fps,
                                 b_plus=args.threshold, b_minus=b_minus,
                                 jitter=jitter, gt_steps=args.gt_steps)
    if args.noise_ratio > 0:
        from .events import inject_noise
        ds.stream = inject_noise(ds.stream, args.noise_ratio, seed=args.seed)
    pipeline.write_dataset(args.out, ds, novel=args.novel, gt_steps=max(args.gt_steps, 256))
    _write_run_ini(os.path.join(args.out, "run.ini"), args, ds.scene.background)
    print(f"wrote {len(ds.stream)} events, {len(ds.poses)} poses to {args.out}")
    return 0


def cmd_train(args):
    config = read_run_config(args.config)
    cfg, tset, _ = _load_training_set(args, config)
    trainer, ckpt = fit(cfg, tset, args.out, resume_from=args.resume)
    print(f"trained {trainer.iteration} iterations -> {ckpt}"
          + (f" ({trainer.aborted_steps} aborted steps)" if trainer.aborted_steps else ""))
    return 0


def cmd_render(args):
    config = read_run_config(args.config)
    params, _ = load_checkpoint(args.checkpoint)
    cfg = _train_config(config)
    intr, settings = _settings_from_config(config, cfg)
    if (args.pose is None) == (args.poses is None):
        raise DataError("render needs exactly one of --pose / --poses")
    if args.pose is not None:
        poses = [parse_pose_line(args.pose)[1]]
    else:
        _, poses = read_poses(args.poses)
    os.makedirs(args.out, exist_ok=True)
    for i, pose in enumerate(poses):
        intensity, depth, depth_norm, opacity = render_image(params, intr, pose, settings)
        write_pgm16(os.path.join(args.out, f"render_{i:05d}.pgm"), intensity)
        write_frame_bin(os.path.join(args.out, f"render_{i:05d}.evf"),
                        [intensity, depth, depth_norm, opacity])
    print(f"rendered {len(poses)} view(s) to {args.out}")
    return 0


def cmd_eval(args):
    config = read_run_config(args.config)
    params, _ = load_checkpoint(args.checkpoint)
    cfg = _train_config(config)
    intr, settings = _settings_from_config(config, cfg)
    poses, frames = _load_gt_dir(args.gt)
    reports = []
    for pose, gt in zip(poses, frames):
        intensity, _, depth_norm, opacity = render_image(params, intr, pose, settings)
        reports.append(evaluate_frame(intensity, depth_norm, opacity, gt))
    mean = mean_report(reports)
    if args.out:
        write_report_csv(args.out, reports)
    print(mean.summary())
    return 0


def cmd_sweep_noise(args):
    from .metrics import noise_sweep
    config = read_run_config(args.config)
    cfg, tset, stream = _load_training_set(args, config)
    intr, settings = _settings_from_config(config, cfg)
    poses, frames = _load_gt_dir(args.gt)
    try:
        ratios = [float(r) for r in args.ratios.split(",") if r.strip()]
    except ValueError:
        raise DataError(f"bad --ratios {args.ratios!r}") from None

    import tempfile

    def train_fn(s):
        tset_rho = build_training_set(s, tset.times, tset.poses, intr,
                                      tset.near, tset.far, tset.aabb_center, tset.aabb_half,
                                      tset.background, noise_ratio=cfg.noise_injection_ratio,
                                      seed=cfg.seed)
        with tempfile.TemporaryDirectory() as tmp:
            trainer, _ = fit(cfg, tset_rho, tmp)
        return trainer.params

    def eval_fn(params):
        reports = []
        for pose, gt in zip(poses, frames):
            intensity, _, depth_norm, opacity = render_image(params, intr, pose, settings)
            reports.append(evaluate_frame(intensity, depth_norm, opacity, gt))
        return mean_report(reports)

    rows = noise_sweep(stream, ratios, train_fn, eval_fn, csv_path=args.out, seed=cfg.seed)
    for rho, r in rows:
        print(f"rho={rho:g} ssim={r.ssim:.4f} mse={r.mse:.5f} abs_rel={r.abs_rel:.5f}")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_all
    results, ok = run_all(seed=args.seed, tol=args.tol)
    for r in results:
        status = "ok" if r.ok(args.tol) else "FAIL"
        print(f"{r.name}: max_rel_err={r.max_rel_err:.3e} over {r.n_checked} probes [{status}]")
    print(f"gradcheck {'passed' if ok else 'FAILED'} at tol {args.tol:g}")
    return 0 if ok else 1


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "simulate": cmd_simulate,
        "train": cmd_train,
        "render": cmd_render,
        "eval": cmd_eval,
        "sweep-noise": cmd_sweep_noise,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (DataError, EvaluationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
