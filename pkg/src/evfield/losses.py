"""The training objective: log-intensity differences between adjacent-pose
renders are compared, through a dead-zone penalty, against the threshold-
weighted event counts, plus a hinge keeping per-interval thresholds from
collapsing toward zero.

Thresholds are stored as unconstrained log-magnitudes so the positive /
negative signs hold by construction; all gradients here are exact and are
checked against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_EPS = 1e-5          # intensity floor inside logs
DEFAULT_BOUND = 0.3     # hinge reference magnitude for both polarities


class ThresholdSet:
    """Per-interval contrast thresholds in log-magnitude parameterization.

    ``log_mag`` is (J, 2): column 0 encodes B+ = exp(a), column 1 encodes
    B- = -exp(b). The data is the single trainable array.
    """

    def __init__(self, log_mag):
        self.log_mag = np.asarray(log_mag, dtype=np.float64).reshape(-1, 2)

    @staticmethod
    def constant(n_intervals, b_plus=0.5, b_minus=-0.5):
        if not (b_plus > 0 and b_minus < 0):
            raise ValueError("expected b_plus > 0 and b_minus < 0")
        row = np.array([np.log(b_plus), np.log(-b_minus)])
        return ThresholdSet(np.tile(row, (n_intervals, 1)))

    def __len__(self):
        return self.log_mag.shape[0]

    @property
    def b_plus(self):
        return np.exp(self.log_mag[:, 0])

    @property
    def b_minus(self):
        return -np.exp(self.log_mag[:, 1])

    def pair(self, j):
        return float(self.b_plus[j]), float(self.b_minus[j])


@dataclass(frozen=True)
class LossBreakdown:
    event_loss: float
    thres_loss: float
    total: float
    residuals: np.ndarray = None  # dead-zone excess per ray, diagnostics


def delta_log_intensity(i_prev, i_next, eps=LOG_EPS):
    """log(I_next + eps) - log(I_prev + eps), with gradients
    (d/dI_prev, d/dI_next) = (-1/(I_prev+eps), 1/(I_next+eps))."""
    i_prev = np.asarray(i_prev, dtype=np.float64)
    i_next = np.asarray(i_next, dtype=np.float64)
    dl = np.log(i_next + eps) - np.log(i_prev + eps)
    return dl, -1.0 / (i_prev + eps), 1.0 / (i_next + eps)


def event_sum(n_pos, n_neg, b_plus, b_minus):
    """Accumulated signed brightness change implied by the event counts."""
    return n_pos * b_plus + n_neg * b_minus


def dead_zone(x, b_plus, b_minus):
    """Excess of x over the zero-cost band [b_minus, b_plus]; 0 inside."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > b_plus, x - b_plus, np.where(x < b_minus, -x + b_minus, 0.0))


def _dead_zone_sides(x, b_plus, b_minus):
    return x > b_plus, x < b_minus


def event_render_loss(delta_l, n_pos, n_neg, interval_idx, thresholds):
    """Mean over the batch of the squared dead-zone excess of
    (delta_l - event_sum), differentiated w.r.t. the rendered log difference
    and both threshold log-magnitudes.

    Returns (loss, d_delta_l (K,), d_log_mag (J, 2), f (K,)).
    """
    delta_l = np.asarray(delta_l, dtype=np.float64)
    interval_idx = np.asarray(interval_idx)
    if np.any(interval_idx < 0) or np.any(interval_idx >= len(thresholds)):
        raise ValueError("interval index without registered thresholds")
    k = len(delta_l)
    bp = thresholds.b_plus[interval_idx]
    bn = thresholds.b_minus[interval_idx]
    n_pos = np.asarray(n_pos, dtype=np.float64)
    n_neg = np.asarray(n_neg, dtype=np.float64)

    x = delta_l - event_sum(n_pos, n_neg, bp, bn)
    f = dead_zone(x, bp, bn)
    loss = float(np.mean(f * f)) if k else 0.0

    above, below = _dead_zone_sides(x, bp, bn)
    df = 2.0 * f / max(k, 1)
    # f = x - B+ above, f = -x + B- below
    dx = np.where(above, df, np.where(below, -df, 0.0))
    d_delta_l = dx

    # through x = dl - n+ B+ - n- B-, plus the direct band-edge terms
    d_bp = -dx * n_pos - np.where(above, df, 0.0)
    d_bn = -dx * n_neg + np.where(below, df, 0.0)
    d_log = np.zeros_like(thresholds.log_mag)
    np.add.at(d_log[:, 0], interval_idx, d_bp * bp)          # dB+/da = B+
    np.add.at(d_log[:, 1], interval_idx, d_bn * bn)          # dB-/db = B-
    return loss, d_delta_l, d_log, f


def threshold_bound_loss(thresholds, b0_plus=DEFAULT_BOUND, b0_minus=-DEFAULT_BOUND):
    """Hinge keeping every interval's thresholds at least as large as the
    reference magnitudes; returns (loss, d_log_mag)."""
    bp = thresholds.b_plus
    bn = thresholds.b_minus
    gap_p = b0_plus - bp
    gap_n = bn - b0_minus
    loss = float(np.sum(np.maximum(gap_p, 0.0)) + np.sum(np.maximum(gap_n, 0.0)))
    d_log = np.zeros_like(thresholds.log_mag)
    d_log[:, 0] = np.where(gap_p > 0, -1.0, 0.0) * bp
    d_log[:, 1] = np.where(gap_n > 0, 1.0, 0.0) * bn
    return loss, d_log
