"""Quantitative evaluation of reconstructed intensity and depth.

Event supervision pins intensity only up to a log-affine family, so every
intensity metric here is computed after fitting (a, b) minimizing
|| a*log(pred) + b - log(gt) ||^2 over the evaluation mask. Depth uses the
opacity-normalized channel under an opacity > 0.5 mask.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError
from .losses import LOG_EPS

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
OPACITY_MASK_LEVEL = 0.5


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------

def align_log_affine(pred, gt, mask=None, eps=LOG_EPS):
    """Least-squares (a, b) mapping log(pred) onto log(gt) over the mask.

    Returns (a, b, degenerate). A constant prediction cannot determine a
    slope; it yields a = 0, b = mean(log gt) and the degenerate flag.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    lp = np.log(pred[mask] + eps)
    lg = np.log(gt[mask] + eps)
    if lp.size < 2:
        raise EvaluationError("alignment needs at least 2 masked pixels")
    var = np.var(lp)
    if var < 1e-18:
        return 0.0, float(np.mean(lg)), True
    a = float(np.cov(lp, lg, bias=True)[0, 1] / var)
    b = float(np.mean(lg) - a * np.mean(lp))
    return a, b, False


def apply_log_affine(pred, a, b, eps=LOG_EPS):
    return np.exp(a * np.log(np.asarray(pred, dtype=np.float64) + eps) + b)


# ---------------------------------------------------------------------------
# image metrics
# ---------------------------------------------------------------------------

def _gaussian_kernel(radius=SSIM_WINDOW // 2, sigma=SSIM_SIGMA):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img, kernel):
    """Separable 'valid' correlation with a symmetric 1D kernel."""
    r = len(kernel) // 2
    tmp = np.empty((img.shape[0], img.shape[1] - 2 * r))
    for i, row in enumerate(img):
        tmp[i] = np.convolve(row, kernel, mode="valid")
    out = np.empty((img.shape[0] - 2 * r, tmp.shape[1]))
    for jcol in range(tmp.shape[1]):
        out[:, jcol] = np.convolve(tmp[:, jcol], kernel, mode="valid")
    return out


def ssim(x, y):
    """Mean local structural similarity over valid 11x11 Gaussian windows.

    Both images are normalized by the range of ``y`` (the reference), so a
    global scale of both inputs cancels out.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("images must share a shape")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    rng_y = y.max() - y.min()
    scale = rng_y if rng_y > 0 else 1.0
    xn = (x - y.min()) / scale
    yn = (y - y.min()) / scale

    k = _gaussian_kernel()
    mu_x = _filter_valid(xn, k)
    mu_y = _filter_valid(yn, k)
    xx = _filter_valid(xn * xn, k) - mu_x * mu_x
    yy = _filter_valid(yn * yn, k) - mu_y * mu_y
    xy = _filter_valid(xn * yn, k) - mu_x * mu_y

    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def mse(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean((x - y) ** 2))


def depth_metrics(pred_depth, gt_depth, mask):
    """(abs_rel, sq_rel, rmse) over masked pixels; gt must be positive."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EvaluationError("depth evaluation mask is empty")
    p = np.asarray(pred_depth, dtype=np.float64)[mask]
    g = np.asarray(gt_depth, dtype=np.float64)[mask]
    if np.any(g <= 0):
        raise EvaluationError("ground-truth depth must be positive on the mask")
    diff = p - g
    return (
        float(np.mean(np.abs(diff) / g)),
        float(np.mean(diff * diff / g)),
        float(np.sqrt(np.mean(diff * diff))),
    )


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    sx = x - x.mean()
    sy = y - y.mean()
    den = np.sqrt((sx * sx).sum() * (sy * sy).sum())
    if den == 0:
        return 0.0
    return float((sx * sy).sum() / den)


# ---------------------------------------------------------------------------
# reconstruction reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    mse: float
    ssim: float
    abs_rel: float
    sq_rel: float
    rmse: float
    align_a: float
    align_b: float
    mask_fraction: float
    degenerate: bool = False

    def summary(self):
        return (
            f"intensity: mse={self.mse:.5f} ssim={self.ssim:.4f} "
            f"(log-affine a={self.align_a:.4f} b={self.align_b:.4f}"
            f"{', degenerate' if self.degenerate else ''})\n"
            f"depth (mask {100 * self.mask_fraction:.1f}%): abs_rel={self.abs_rel:.5f} "
            f"sq_rel={self.sq_rel:.5f} rmse={self.rmse:.5f}"
        )


def evaluate_frame(pred_intensity, pred_depth_norm, pred_opacity, gt_frame):
    """Full per-view report against an oracle frame: align intensity in log
    space over the whole image, then score; depth over the opacity mask."""
    a, b, degen = align_log_affine(pred_intensity, gt_frame.intensity)
    aligned = apply_log_affine(pred_intensity, a, b)
    mask = (gt_frame.opacity > OPACITY_MASK_LEVEL) & (pred_opacity > OPACITY_MASK_LEVEL)
    rng = gt_frame.intensity.max() - gt_frame.intensity.min()
    mse_val = mse(aligned / rng if rng > 0 else aligned, gt_frame.intensity / rng if rng > 0 else gt_frame.intensity)
    if mask.any():
        abs_rel, sq_rel, rmse_val = depth_metrics(pred_depth_norm, gt_frame.depth_norm, mask)
    else:
        abs_rel = sq_rel = rmse_val = float("nan")
    return EvalReport(mse_val, ssim(aligned, gt_frame.intensity), abs_rel, sq_rel, rmse_val,
                      a, b, float(mask.mean()), degen)


def mean_report(reports):
    vals = {k: float(np.mean([getattr(r, k) for r in reports]))
            for k in ("mse", "ssim", "abs_rel", "sq_rel", "rmse", "align_a", "align_b", "mask_fraction")}
    return EvalReport(degenerate=any(r.degenerate for r in reports), **vals)


def write_report_csv(path, reports, labels=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["view", "mse", "ssim", "abs_rel", "sq_rel", "rmse",
                    "align_a", "align_b", "mask_fraction"])
        for i, r in enumerate(reports):
            label = labels[i] if labels else str(i)
            w.writerow([label, r.mse, r.ssim, r.abs_rel, r.sq_rel, r.rmse,
                        r.align_a, r.align_b, r.mask_fraction])


def noise_sweep(base_stream, ratios, train_fn, eval_fn, csv_path=None, seed=0):
    """Robustness sweep: corrupt the stream at each ratio, retrain with an
    identical configuration, and score held-out views.

    ``train_fn(stream) -> artifact`` and ``eval_fn(artifact) -> EvalReport``
    keep this independent of how runs are configured. Returns a list of
    (ratio, EvalReport) and optionally writes `rho,ssim,mse,abs_rel` rows.
    """
    from .events import inject_noise

    rows = []
    for rho in ratios:
        if rho < 0:
            raise ValueError("noise ratios must be non-negative")
        stream = inject_noise(base_stream, rho, seed=[seed, int(round(1e6 * rho))]) if rho > 0 else base_stream
        report = eval_fn(train_fn(stream))
        rows.append((rho, report))
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rho", "ssim", "mse", "abs_rel"])
            for rho, r in rows:
                w.writerow([rho, r.ssim, r.mse, r.abs_rel])
    return rows
