"""High-level glue: simulate an event dataset from a built-in scene along a
closed orbit, package it for training, and score reconstructions against
the analytic oracle.

A dataset with J intervals uses J orbit poses plus a wrap-around copy of the
first, so the trajectory closes and every interval spans 1/fps_frames * 10
sub-frames of simulated video.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .events import NoiseConfig, simulate_events
from .geometry import CameraIntrinsics, interpolate_pose, orbit_trajectory
from .io import write_events, write_frame_bin, write_pgm16, write_poses
from .metrics import evaluate_frame, mean_report
from .rendering import RenderSettings, render_image
from .scenes import builtin_scene, gt_render, scene_preset
from .training import build_training_set

INTERVAL_S = 1.0 / 24.0


def make_intrinsics(width, height, fov_deg=45.0):
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
    return CameraIntrinsics(f, f, width / 2.0, height / 2.0, width, height)


@dataclass
class SimulatedDataset:
    """Everything a training run and its evaluation need."""

    scene_name: str
    scene: object
    preset: object
    intr: CameraIntrinsics
    times: np.ndarray          # (J+1,) interval boundaries
    poses: list                # (J+1,) Pose, closed loop
    frame_times: np.ndarray    # (F,) simulated video timestamps
    log_frames: np.ndarray     # (F, H, W) log intensity
    stream: object             # EventStream
    b_plus: float
    b_minus: float

    def boundary_frame_indices(self, substeps):
        return np.arange(0, len(self.frame_times), substeps)


def simulate_orbit(scene_name, width=64, height=64, n_intervals=60, fps=240,
                   b_plus=0.3, b_minus=-0.3, jitter=NoiseConfig(), gt_steps=192,
                   fov_deg=None, start_azimuth_deg=0.0, elevation_deg=None):
    """Render the orbit video at ``fps`` and run the event simulator over it."""
    scene = builtin_scene(scene_name)
    preset = scene_preset(scene_name)
    intr = make_intrinsics(width, height, fov_deg or preset.fov_deg)
    elev = preset.elevation_deg if elevation_deg is None else elevation_deg

    base = orbit_trajectory(preset.orbit_center, preset.orbit_radius, elev,
                            n_intervals, start_azimuth_deg=start_azimuth_deg)
    poses = base + [base[0]]
    times = np.arange(n_intervals + 1) * INTERVAL_S

    substeps = max(1, int(round(fps * INTERVAL_S)))
    frame_times = []
    log_frames = []
    for j in range(n_intervals):
        for k in range(substeps):
            t = k / substeps
            pose = poses[j] if k == 0 else interpolate_pose(poses[j], poses[j + 1], t)
            frame = gt_render(scene, intr, pose, preset.near, preset.far, n_steps=gt_steps,
                              timestamp=times[j] + t * INTERVAL_S)
            frame_times.append(frame.timestamp)
            log_frames.append(np.log(np.maximum(frame.intensity, 1e-12)))
    final = gt_render(scene, intr, poses[-1], preset.near, preset.far, n_steps=gt_steps,
                      timestamp=times[-1])
    frame_times.append(final.timestamp)
    log_frames.append(np.log(np.maximum(final.intensity, 1e-12)))

    frame_times = np.array(frame_times)
    log_frames = np.stack(log_frames)
    stream = simulate_events(list(zip(frame_times, log_frames)), b_plus, b_minus, jitter)
    return SimulatedDataset(scene_name, scene, preset, intr, times, poses,
                            frame_times, log_frames, stream, b_plus, b_minus)


def training_set_from_dataset(ds, noise_ratio=0.05, seed=0, stream=None):
    """Bundle a (possibly substituted / corrupted) stream with the dataset's
    poses and geometry; `stream=None` uses the clean simulated one."""
    preset = ds.preset
    return build_training_set(
        stream if stream is not None else ds.stream,
        ds.times, ds.poses, ds.intr, preset.near, preset.far,
        preset.aabb_center, preset.aabb_half, ds.scene.background,
        noise_ratio=noise_ratio, seed=seed,
    )


def novel_poses(ds, n=10, elevation_offset_deg=10.0):
    """Held-out viewpoints: a shifted-elevation orbit sampled between the
    training azimuths."""
    spacing = 360.0 / len(ds.times[:-1]) if len(ds.times) > 1 else 180.0
    return orbit_trajectory(ds.preset.orbit_center, ds.preset.orbit_radius,
                            ds.preset.elevation_deg + elevation_offset_deg, n,
                            start_azimuth_deg=0.5 * spacing)


def oracle_frames(ds, poses, gt_steps=256):
    return [gt_render(ds.scene, ds.intr, p, ds.preset.near, ds.preset.far, n_steps=gt_steps)
            for p in poses]


def render_settings(ds, n_coarse=64, n_fine=64):
    p = ds.preset
    return RenderSettings(p.near, p.far, p.aabb_center, p.aabb_half,
                          ds.scene.background, n_coarse, n_fine)


def evaluate_views(params, intr, poses, gt_frames, settings):
    """Render each view and score it against its oracle frame; returns
    (per-view reports, mean report)."""
    reports = []
    for pose, gt in zip(poses, gt_frames):
        intensity, _, depth_norm, opacity = render_image(params, intr, pose, settings)
        reports.append(evaluate_frame(intensity, depth_norm, opacity, gt))
    return reports, mean_report(reports)


# ---------------------------------------------------------------------------
# on-disk dataset layout (used by the CLI)
# ---------------------------------------------------------------------------

def write_dataset(out_dir, ds, substeps=None, novel=0, novel_elevation_offset_deg=10.0,
                  gt_steps=256):
    """events.txt + poses.txt + oracle frames for the boundary poses, plus an
    optional held-out view set under novel/."""
    os.makedirs(out_dir, exist_ok=True)
    write_events(os.path.join(out_dir, "events.txt"), ds.stream)
    write_poses(os.path.join(out_dir, "poses.txt"), ds.times, ds.poses)
    _write_frames(os.path.join(out_dir, "gt"), ds, ds.poses, ds.times, gt_steps)
    if novel:
        poses = novel_poses(ds, novel, novel_elevation_offset_deg)
        _write_frames(os.path.join(out_dir, "novel"), ds, poses,
                      np.zeros(len(poses)), gt_steps)


def _write_frames(frame_dir, ds, poses, times, gt_steps):
    os.makedirs(frame_dir, exist_ok=True)
    write_poses(os.path.join(frame_dir, "poses.txt"), times, poses)
    for i, pose in enumerate(poses):
        frame = gt_render(ds.scene, ds.intr, pose, ds.preset.near, ds.preset.far,
                          n_steps=gt_steps)
        write_frame_bin(os.path.join(frame_dir, f"frame_{i:05d}.evf"),
                        [frame.intensity, frame.depth, frame.depth_norm, frame.opacity])
        write_pgm16(os.path.join(frame_dir, f"frame_{i:05d}.pgm"), frame.intensity)
