"""Finite-difference verification of every hand-written gradient.

Three layers of checks, all in float64 with central differences:

* field: d(objective)/d(parameter) through the MLP alone;
* composite: d(objective)/d(sigma, y) through the alpha compositing;
* pipeline: the full training objective (fixed ray samples -> field ->
  compositing -> background blend -> log difference -> dead-zone loss +
  threshold hinge) against every parameter and both threshold channels.

Sample positions are intentionally not differentiated (resampling is a
sampling heuristic, not part of the objective), so the pipeline check holds
the sample set fixed while probing.

At a ReLU or dead-zone kink a central difference straddles two linear
pieces and measures neither side's derivative, so probe inputs are redrawn
(deterministically) until every pre-activation and every loss residual sits
clear of its kink by more than the perturbation can reach.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import (EncodingConfig, FieldConfig, encode, field_backward,
                    field_forward, init_field)
from .losses import ThresholdSet, delta_log_intensity, event_render_loss, threshold_bound_loss
from .rendering import RaySamples, composite, composite_backward

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-5


def fd_resolution_floor(objective_scale, h=DEFAULT_H, tol=DEFAULT_TOL):
    """Smallest gradient magnitude measurable by central differences.

    Rounding the objective to float64 perturbs (L+ - L-)/(2h) by roughly
    kappa * eps * |L| / (2h) with kappa a small accumulation factor;
    components below that noise divided by the target tolerance cannot be
    distinguished from it, so they enter the relative error through this
    floor instead of their own magnitude.
    """
    eps = np.finfo(np.float64).eps
    return max(1e-6, 8.0 * eps * max(1.0, abs(objective_scale)) / (h * tol))


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(floor, abs(a), abs(b))


def _fd_probe(objective, arrays, grads, h, probes_per_array=None, rng=None):
    """Central-difference every (or a sampled subset of) entries of
    ``arrays``, comparing against the parallel analytic ``grads``."""
    worst = 0.0
    n_checked = 0
    floor = fd_resolution_floor(objective(), h)
    for arr, g in zip(arrays, grads):
        flat = arr.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        if probes_per_array is None or flat.size <= probes_per_array:
            idx = range(flat.size)
        else:
            idx = rng.choice(flat.size, size=probes_per_array, replace=False)
        for k in idx:
            saved = flat[k]
            flat[k] = saved + h
            lp = objective()
            flat[k] = saved - h
            lm = objective()
            flat[k] = saved
            worst = max(worst, rel_err((lp - lm) / (2 * h), gflat[k], floor))
            n_checked += 1
    return worst, n_checked


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_checked: int

    def ok(self, tol=DEFAULT_TOL):
        return self.max_rel_err <= tol


_KINK_MARGIN = 1e-4  # > h * max |layer input|, with slack


def _kink_clearance(params, x_enc, d_enc):
    """Distance of the nearest ReLU pre-activation to zero, computed by an
    independent plain-loop forward (the library clobbers pre-activations)."""
    cfg = params.config
    a = {k: v.astype(np.float64) for k, v in params.arrays.items()}
    h = x_enc.astype(np.float64)
    clearance = np.inf
    for i in range(cfg.depth):
        inp = np.concatenate([h, x_enc], axis=-1) if i in cfg.skip_layers else h
        pre = inp @ a[f"trunk.{i}.w"] + a[f"trunk.{i}.b"]
        clearance = min(clearance, float(np.abs(pre).min()))
        h = np.maximum(pre, 0.0)
    feat = h @ a["feat.w"] + a["feat.b"]
    view_pre = np.concatenate([feat, d_enc.astype(np.float64)], axis=-1) @ a["view.w"] + a["view.b"]
    return min(clearance, float(np.abs(view_pre).min()))


def _draw_clear_inputs(params, cfg, rng, n_points, margin=_KINK_MARGIN, attempts=64):
    """Sample encodings whose pre-activations all sit clear of zero."""
    best = None
    for trial in range(attempts):
        x = rng.uniform(-1, 1, (n_points, 3))
        d = rng.standard_normal((n_points, 3))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        x_enc = encode(x, cfg.encoding, "position", dtype=np.float64)
        d_enc = encode(d, cfg.encoding, "direction", dtype=np.float64)
        clearance = _kink_clearance(params, x_enc, d_enc)
        if best is None or clearance > best[0]:
            best = (clearance, x_enc, d_enc)
        if clearance > margin:
            break
    return best[1], best[2]


# ---------------------------------------------------------------------------
# field
# ---------------------------------------------------------------------------

def check_field(config=None, n_points=8, seed=0, h=DEFAULT_H, probes_per_array=None):
    """Objective sum(c_s * sigma + c_y * y) with random cotangents."""
    if config is None:
        config = FieldConfig(depth=2, width=32, encoding=EncodingConfig())
    rng = np.random.default_rng(seed)
    params = init_field(config, seed=seed, dtype=np.float64)
    x_enc, d_enc = _draw_clear_inputs(params, config, rng, n_points)
    c_s = rng.standard_normal(n_points)
    c_y = rng.standard_normal(n_points)

    def objective():
        sigma, y, _ = field_forward(params, x_enc, d_enc)
        return float(np.dot(c_s, sigma) + np.dot(c_y, y))

    sigma, y, cache = field_forward(params, x_enc, d_enc)
    grads = params.zero_grads()
    field_backward(params, cache, c_s, c_y, grads)
    worst, n = _fd_probe(objective, params.param_list(),
                         [grads[k] for k in params.names()], h,
                         probes_per_array=probes_per_array, rng=rng)
    label = f"field[{config.depth}x{config.width}]"
    return CheckResult(label, worst, n)


# ---------------------------------------------------------------------------
# compositing
# ---------------------------------------------------------------------------

def check_composite(n=32, seed=0, h=DEFAULT_H):
    rng = np.random.default_rng(seed)
    near, far = 0.5, 4.0
    s = np.sort(rng.uniform(near, far, (1, n)), axis=-1)
    delta = np.concatenate([np.diff(s, axis=-1), far - s[:, -1:]], axis=-1)
    samples = RaySamples(s, np.zeros((1, n, 3)), delta, near, far)
    sigma = rng.uniform(0.05, 2.0, (1, n))
    y = rng.uniform(0.1, 2.0, (1, n))
    c = rng.standard_normal(3)

    def objective():
        res = composite(sigma, y, samples)
        return float(c[0] * res.intensity[0] + c[1] * res.depth[0] + c[2] * res.opacity[0])

    res = composite(sigma, y, samples)
    d_sigma, d_y = composite_backward(res, np.array([c[0]]), np.array([c[1]]), np.array([c[2]]))
    worst, n_checked = _fd_probe(objective, [sigma, y], [d_sigma, d_y], h)
    return CheckResult(f"composite[n={n}]", worst, n_checked)


# ---------------------------------------------------------------------------
# full objective
# ---------------------------------------------------------------------------

def check_pipeline(seed=0, h=DEFAULT_H, n_rays=4, n_samples=10, lam=2.0):
    """Every parameter and both threshold channels through the total loss.

    Builds a tiny two-pose batch with fixed samples, random event counts,
    and thresholds straddling the hinge so both loss terms are active.
    """
    rng = np.random.default_rng(seed)
    config = FieldConfig(depth=2, width=32)
    params = init_field(config, seed=seed, dtype=np.float64)
    # spread raw weights so densities/luminances vary across samples
    for name in params.names():
        if name.startswith("trunk") and name.endswith(".w"):
            params.arrays[name] *= 1.5
    background = 0.3
    near, far = 1.0, 4.0

    for attempt in range(64):
        thresholds = ThresholdSet(rng.uniform(-1.6, -0.6, (3, 2)))
        s = np.sort(rng.uniform(near, far, (2 * n_rays, n_samples)), axis=-1)
        delta = np.concatenate([np.diff(s, axis=-1), far - s[:, -1:]], axis=-1)
        origins = rng.uniform(-0.5, 0.5, (2 * n_rays, 3))
        dirs = rng.standard_normal((2 * n_rays, 3))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        pts = origins[:, None, :] + dirs[:, None, :] * s[..., None]
        samples = RaySamples(s, pts, delta, near, far)

        interval_idx = rng.integers(0, len(thresholds), n_rays)
        n_pos = rng.integers(0, 4, n_rays)
        n_neg = rng.integers(0, 4, n_rays)

        x_enc = encode(pts.reshape(-1, 3) / 4.0, config.encoding, "position", dtype=np.float64)
        d_enc = encode(np.repeat(dirs, n_samples, axis=0), config.encoding, "direction",
                       dtype=np.float64)

        # keep every non-smooth point out of the perturbation's reach
        if _kink_clearance(params, x_enc, d_enc) <= _KINK_MARGIN:
            continue
        sigma0, y0, _ = field_forward(params, x_enc, d_enc)
        res0 = composite(sigma0.reshape(2 * n_rays, n_samples),
                         y0.reshape(2 * n_rays, n_samples), samples)
        blend0 = res0.intensity + (1.0 - res0.opacity) * background
        dl0, _, _ = delta_log_intensity(blend0[:n_rays], blend0[n_rays:])
        bp = thresholds.b_plus[interval_idx]
        bn = thresholds.b_minus[interval_idx]
        x0 = dl0 - (n_pos * bp + n_neg * bn)
        dead_gap = np.minimum(np.abs(x0 - bp), np.abs(x0 - bn)).min()
        hinge_gap = min(np.abs(0.3 - thresholds.b_plus).min(),
                        np.abs(thresholds.b_minus + 0.3).min())
        if dead_gap > 1e-2 and hinge_gap > 1e-3:
            break

    def forward_all():
        sigma, y, cache = field_forward(params, x_enc, d_enc)
        res = composite(sigma.reshape(2 * n_rays, n_samples),
                        y.reshape(2 * n_rays, n_samples), samples)
        blend = res.intensity + (1.0 - res.opacity) * background
        dl, g_prev, g_next = delta_log_intensity(blend[:n_rays], blend[n_rays:])
        ev, d_dl, d_log, _ = event_render_loss(dl, n_pos, n_neg, interval_idx, thresholds)
        th, d_bound = threshold_bound_loss(thresholds)
        return (ev + lam * th, cache, res, d_dl, g_prev, g_next, d_log + lam * d_bound)

    total, cache, res, d_dl, g_prev, g_next, d_log_total = forward_all()
    d_blend = np.concatenate([d_dl * g_prev, d_dl * g_next])
    d_sigma, d_y = composite_backward(res, d_blend, None, -d_blend * background)
    grads = params.zero_grads()
    field_backward(params, cache, d_sigma.reshape(-1), d_y.reshape(-1), grads)

    def objective():
        return float(forward_all()[0])

    arrays = params.param_list() + [thresholds.log_mag]
    analytic = [grads[k] for k in params.names()] + [d_log_total]
    worst, n_checked = _fd_probe(objective, arrays, analytic, h)
    return CheckResult("pipeline[2x32+thresholds]", worst, n_checked)


def run_all(seed=0, tol=DEFAULT_TOL, spot_probes=8):
    """The gradcheck suite: exhaustive on reduced nets, spot probes on the
    default architecture. Returns (results, all_ok)."""
    rng_seed = int(seed)
    results = [
        check_field(seed=rng_seed),
        check_field(config=FieldConfig(), seed=rng_seed, probes_per_array=spot_probes),
        check_composite(seed=rng_seed),
        check_composite(n=2, seed=rng_seed + 1),
        check_pipeline(seed=rng_seed),
    ]
    return results, all(r.ok(tol) for r in results)
