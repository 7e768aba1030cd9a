"""End-to-end optimization: ray batching over event-count intervals, dual-
pose rendering, Adam updates over field parameters and thresholds, training-
time noise injection, checkpoints, and CSV logging.

Every random draw in a step comes from a counter-based generator keyed on
(seed, iteration), so runs are bit-reproducible and resume is exact.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .events import EventStream, count_events, inject_noise
from .field import FieldConfig, FieldParams, init_field, load_checkpoint, save_checkpoint
from .losses import LossBreakdown, ThresholdSet, delta_log_intensity, event_render_loss, threshold_bound_loss
from .rendering import RenderSettings, composite_backward, render_rays
from .field import field_backward
from .geometry import rays_for_pixels

log = logging.getLogger(__name__)

LOG_HEADER = ["iter", "event_loss", "thres_loss", "total", "B_plus_mean", "B_minus_mean", "wall_ms"]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_rays: int = 1024
    iterations: int = 5000          # desk scale; full-scale runs use ~50k
    lam: float = 1000.0             # threshold-bound weight (batch-mean loss convention)
    n_coarse: int = 64
    n_fine: int = 64
    noise_injection_ratio: float = 0.05
    joint_thresholds: bool = True
    threshold_init: float = 0.5
    fixed_threshold: float = 0.3    # used when joint_thresholds is off
    bound: float = 0.3              # B0 magnitude in the hinge
    grad_clip: float = 10.0
    lr_decay: float = 0.0           # 0 = constant lr, else final lr fraction
    seed: int = 0
    field: FieldConfig = field(default_factory=FieldConfig)
    log_every: int = 50
    checkpoint_every: int = 0       # 0 = final only


def desk_config(**overrides):
    """The small-footprint configuration used by the acceptance experiments:
    4x128 trunk, 32+32 samples, 128-ray batches."""
    cfg = TrainConfig(
        batch_rays=128, n_coarse=32, n_fine=32,
        field=FieldConfig(depth=4, width=128),
    )
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class TrainingSet:
    """Aligned interval poses and per-interval event-count grids."""

    times: np.ndarray           # (J+1,) seconds
    poses: list                 # (J+1,) Pose
    n_pos: np.ndarray           # (J, H, W) int32
    n_neg: np.ndarray
    intr: object                # CameraIntrinsics
    near: float
    far: float
    aabb_center: tuple
    aabb_half: float
    background: float = 0.0

    def __post_init__(self):
        self.rotations = np.stack([p.rotation for p in self.poses])
        self.translations = np.stack([p.translation for p in self.poses])

    @property
    def n_intervals(self):
        return self.n_pos.shape[0]

    def settings(self, cfg):
        return RenderSettings(self.near, self.far, self.aabb_center, self.aabb_half,
                              self.background, cfg.n_coarse, cfg.n_fine)


def build_training_set(stream, times, poses, intr, near, far, aabb_center, aabb_half,
                       background=0.0, noise_ratio=0.05, seed=0):
    """Slice the stream at pose timestamps, inject spurious events per slice
    at ``noise_ratio``, and count. Counts are all the loss ever reads."""
    times = np.asarray(times, dtype=np.float64)
    if len(poses) < 2 or len(times) != len(poses):
        raise ValueError("need >= 2 timestamped poses aligned with `times`")
    if len(stream) and (times[0] > stream.t[0] or times[-1] < stream.t[-1]):
        raise ValueError("pose timestamps must cover the event stream")

    grids = []
    lo = np.searchsorted(stream.t, times[:-1], side="left")
    hi = np.searchsorted(stream.t, times[1:], side="left")
    for j in range(len(times) - 1):
        sl = slice(lo[j], hi[j])
        sub = EventStream(stream.t[sl], stream.u[sl], stream.v[sl], stream.p[sl],
                          stream.width, stream.height, float(times[j]), float(times[j + 1]))
        if noise_ratio > 0:
            sub = inject_noise(sub, noise_ratio, seed=[seed, j])
        grids.extend(count_events(sub, times[j : j + 2]))
    n_pos = np.stack([g.n_pos for g in grids])
    n_neg = np.stack([g.n_neg for g in grids])
    return TrainingSet(times, list(poses), n_pos, n_neg, intr,
                       near, far, aabb_center, aabb_half, background)


def sample_batch(tset, batch_rays, rng):
    """Uniform (interval, pixel) draws; zero-count pixels stay in, they carry
    the no-event constraint through the dead zone."""
    if batch_rays < 1:
        raise ValueError("batch_rays must be >= 1")
    j = rng.integers(0, tset.n_intervals, batch_rays)
    u = rng.integers(0, tset.intr.width, batch_rays)
    v = rng.integers(0, tset.intr.height, batch_rays)
    return j, u, v, tset.n_pos[j, v, u], tset.n_neg[j, v, u]


class Adam:
    """Adaptive-moment optimizer over a list of arrays (updated in place)."""

    def __init__(self, arrays, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.arrays = arrays
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
            g = g.astype(a.dtype, copy=False)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            a -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _step_rng(seed, iteration):
    return np.random.Generator(np.random.Philox(key=np.array([seed, iteration], dtype=np.uint64)))


def clip_global_norm(grad_arrays, max_norm):
    total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grad_arrays))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grad_arrays:
            g *= scale
    return total


class Trainer:
    """Holds parameters, thresholds, and optimizer state for one run."""

    def __init__(self, cfg, tset, params=None, thresholds=None):
        self.cfg = cfg
        self.tset = tset
        self.settings = tset.settings(cfg)
        self.params = params if params is not None else init_field(cfg.field, seed=cfg.seed)
        if thresholds is not None:
            self.thresholds = thresholds
        elif cfg.joint_thresholds:
            self.thresholds = ThresholdSet.constant(tset.n_intervals,
                                                    cfg.threshold_init, -cfg.threshold_init)
        else:
            self.thresholds = ThresholdSet.constant(tset.n_intervals,
                                                    cfg.fixed_threshold, -cfg.fixed_threshold)
        self.adam = Adam(self.params.param_list() + [self.thresholds.log_mag],
                         cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.iteration = 0
        self.aborted_steps = 0

    def _lr(self):
        cfg = self.cfg
        if cfg.lr_decay <= 0:
            return cfg.learning_rate
        frac = self.iteration / max(1, cfg.iterations)
        return cfg.learning_rate * cfg.lr_decay ** frac

    def train_step(self):
        """One optimization step; returns the loss breakdown. Non-finite
        losses abort the step without touching any state."""
        cfg = self.cfg
        tset = self.tset
        rng = _step_rng(cfg.seed, self.iteration)
        j, u, v, n_pos, n_neg = sample_batch(tset, cfg.batch_rays, rng)
        k = len(j)

        rot = np.concatenate([tset.rotations[j], tset.rotations[j + 1]])
        trans = np.concatenate([tset.translations[j], tset.translations[j + 1]])
        uu = np.concatenate([u, u])
        vv = np.concatenate([v, v])
        origins, dirs = rays_for_pixels(tset.intr, rot, trans, uu, vv)

        rr = render_rays(self.params, self.settings, origins, dirs, rng=rng, train_mode=True)
        i_prev, i_next = rr.intensity[:k], rr.intensity[k:]
        dl, g_prev, g_next = delta_log_intensity(i_prev, i_next)
        ev_loss, d_dl, d_log_thr, f = event_render_loss(dl, n_pos, n_neg, j, self.thresholds)
        thr_loss, d_log_bound = threshold_bound_loss(self.thresholds, cfg.bound, -cfg.bound)
        lam = cfg.lam if cfg.joint_thresholds else 0.0
        total = ev_loss + lam * thr_loss
        if not np.isfinite(total):
            self.aborted_steps += 1
            log.warning("aborted step %d: non-finite loss (event=%r thres=%r)",
                        self.iteration, ev_loss, thr_loss)
            self.iteration += 1
            return LossBreakdown(ev_loss, thr_loss, total, f)

        d_blend = np.concatenate([d_dl * g_prev, d_dl * g_next])
        d_opacity = -d_blend * self.settings.background
        d_sigma, d_y = composite_backward(rr.fine, d_blend, None, d_opacity)
        grads = self.params.zero_grads()
        field_backward(self.params, rr.field_cache, d_sigma.reshape(-1), d_y.reshape(-1), grads)

        if cfg.joint_thresholds:
            thr_grad = d_log_thr + lam * d_log_bound
        else:
            thr_grad = np.zeros_like(self.thresholds.log_mag)

        grad_list = [grads[name] for name in self.params.names()] + [thr_grad]
        clip_global_norm(grad_list, cfg.grad_clip)
        self.adam.step(grad_list, lr=self._lr())
        self.iteration += 1
        return LossBreakdown(ev_loss, thr_loss, total, f)

    # -- persistence -------------------------------------------------------

    def save(self, path):
        save_checkpoint(path, self.params, self.thresholds.log_mag)
        state = {"iteration": np.int64(self.iteration), "adam_t": np.int64(self.adam.t)}
        for i, (m, v) in enumerate(zip(self.adam.m, self.adam.v)):
            state[f"m_{i}"] = m
            state[f"v_{i}"] = v
        np.savez(path + ".state.npz", **state)

    @classmethod
    def restore(cls, cfg, tset, path):
        params, log_mag = load_checkpoint(path)
        trainer = cls(cfg, tset, params=params.astype(np.float32),
                      thresholds=ThresholdSet(log_mag.astype(np.float64)))
        with np.load(path + ".state.npz") as state:
            trainer.iteration = int(state["iteration"])
            trainer.adam.t = int(state["adam_t"])
            for i in range(len(trainer.adam.m)):
                trainer.adam.m[i][...] = state[f"m_{i}"]
                trainer.adam.v[i][...] = state[f"v_{i}"]
        return trainer


def fit(cfg, tset, out_dir, resume_from=None):
    """Run the configured number of iterations, logging to ``log.csv`` and
    writing ``checkpoint.evnf`` (+ optimizer sidecar) in ``out_dir``.

    Resuming from a checkpoint reproduces the uninterrupted run bit for bit
    because per-step randomness is keyed on (seed, iteration).
    """
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.evnf")
    log_path = os.path.join(out_dir, "log.csv")

    if resume_from is not None:
        trainer = Trainer.restore(cfg, tset, resume_from)
        mode = "a"
    else:
        trainer = Trainer(cfg, tset)
        mode = "w"

    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(LOG_HEADER)
        while trainer.iteration < cfg.iterations:
            t0 = time.perf_counter()
            breakdown = trainer.train_step()
            wall_ms = (time.perf_counter() - t0) * 1e3
            it = trainer.iteration
            if it % max(1, cfg.log_every) == 0 or it == cfg.iterations:
                writer.writerow([it, f"{breakdown.event_loss:.8g}", f"{breakdown.thres_loss:.8g}",
                                 f"{breakdown.total:.8g}",
                                 f"{float(np.mean(trainer.thresholds.b_plus)):.8g}",
                                 f"{float(np.mean(trainer.thresholds.b_minus)):.8g}",
                                 f"{wall_ms:.3f}"])
            if cfg.checkpoint_every and it % cfg.checkpoint_every == 0 and it < cfg.iterations:
                trainer.save(ckpt_path)
    trainer.save(ckpt_path)
    return trainer, ckpt_path
