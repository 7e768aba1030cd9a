"""Contrast-threshold event camera simulation over rendered log-intensity
frames, spurious-noise injection, and per-interval event counting.

The simulator keeps one reference log-intensity level per pixel and emits an
event each time the (linearly interpolated) signal crosses a full threshold
step; that loop is the ground truth the training loss is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class Event(NamedTuple):
    t: float
    u: int
    v: int
    p: int  # +1 or -1


@dataclass(frozen=True)
class NoiseConfig:
    """Spurious-event ratio and per-pixel threshold jitter."""

    ratio: float = 0.0
    threshold_jitter_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.ratio < 0 or self.threshold_jitter_sigma < 0:
            raise ValueError("noise parameters must be non-negative")


@dataclass(frozen=True)
class EventStream:
    """Time-sorted event arrays plus sensor geometry and time span."""

    t: np.ndarray   # float64 seconds
    u: np.ndarray   # int32 column
    v: np.ndarray   # int32 row
    p: np.ndarray   # int8, +1 / -1
    width: int
    height: int
    t_start: float
    t_end: float

    def __post_init__(self):
        n = len(self.t)
        if not (len(self.u) == len(self.v) == len(self.p) == n):
            raise ValueError("event arrays must share one length")
        if n:
            if self.t[0] < self.t_start or self.t[-1] >= self.t_end:
                raise ValueError("events must lie in [t_start, t_end)")
            if np.any(np.diff(self.t) < 0):
                raise ValueError("events must be sorted by time")

    def __len__(self):
        return len(self.t)

    def __getitem__(self, k):
        return Event(float(self.t[k]), int(self.u[k]), int(self.v[k]), int(self.p[k]))


def _sorted_stream(t, u, v, p, width, height, t_start, t_end):
    order = np.lexsort((p, u, v, t))
    return EventStream(
        np.ascontiguousarray(t[order]),
        np.ascontiguousarray(u[order].astype(np.int32)),
        np.ascontiguousarray(v[order].astype(np.int32)),
        np.ascontiguousarray(p[order].astype(np.int8)),
        width, height, float(t_start), float(t_end),
    )


def make_stream(t, u, v, p, width, height, t_start=None, t_end=None):
    """Build a sorted EventStream from unsorted event arrays."""
    t = np.asarray(t, dtype=np.float64)
    if t_start is None:
        t_start = float(t.min()) if len(t) else 0.0
    if t_end is None:
        t_end = float(np.nextafter(t.max(), np.inf)) if len(t) else 0.0
    return _sorted_stream(t, np.asarray(u), np.asarray(v), np.asarray(p),
                          width, height, t_start, t_end)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def pixel_thresholds(shape, b_plus, b_minus, jitter):
    """Per-pixel effective thresholds, clamped away from zero at 0.05."""
    bp = np.full(shape, b_plus)
    bn = np.full(shape, b_minus)
    if jitter.threshold_jitter_sigma > 0:
        rng = np.random.default_rng(jitter.seed)
        bp = bp + rng.normal(0.0, jitter.threshold_jitter_sigma, shape)
        bn = bn - np.abs(rng.normal(0.0, jitter.threshold_jitter_sigma, shape))
    return np.maximum(bp, 0.05), np.minimum(bn, -0.05)


def simulate_events(log_frames, b_plus, b_minus, jitter=NoiseConfig()):
    """Run the threshold-crossing loop over (timestamp, HxW log-intensity)
    frames.

    Per pixel, a reference level starts at the first frame's value; each
    frame transition emits one event per full threshold step between the
    reference and the new value, advancing the reference by the signed
    threshold each time. Event timestamps interpolate the crossing times
    assuming the log signal moves linearly between frames.
    """
    if len(log_frames) < 2:
        raise ValueError("need at least two frames")
    if not (b_plus > 0 and b_minus < 0):
        raise ValueError("expected b_plus > 0 and b_minus < 0")
    times = np.array([t for t, _ in log_frames], dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        raise ValueError("frame timestamps must be strictly increasing")

    first = np.asarray(log_frames[0][1], dtype=np.float64)
    if not np.all(np.isfinite(first)):
        raise ValueError("non-finite log intensity in frame 0")
    h, w = first.shape
    bp, bn = pixel_thresholds((h, w), b_plus, b_minus, jitter)

    ref = first.copy()
    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out_t, out_u, out_v, out_p = [], [], [], []

    prev = first
    for k in range(1, len(log_frames)):
        t0, t1 = times[k - 1], times[k]
        cur = np.asarray(log_frames[k][1], dtype=np.float64)
        if not np.all(np.isfinite(cur)):
            raise ValueError(f"non-finite log intensity in frame {k}")
        diff = cur - ref
        n_pos = np.where(diff > 0, np.floor(diff / bp), 0.0).astype(np.int64)
        n_neg = np.where(diff < 0, np.floor(diff / bn), 0.0).astype(np.int64)

        for counts, thr, pol in ((n_pos, bp, 1), (n_neg, bn, -1)):
            mask = counts > 0
            if not np.any(mask):
                continue
            c = counts[mask]
            total = int(c.sum())
            # grouped arange: k-th event of a pixel crosses level ref + k*thr
            seq = np.arange(total) - np.repeat(np.cumsum(c) - c, c) + 1
            levels = np.repeat(ref[mask], c) + seq * np.repeat(thr[mask], c)
            l0 = np.repeat(prev[mask], c)
            l1 = np.repeat(cur[mask], c)
            frac = np.divide(levels - l0, l1 - l0, out=np.zeros_like(levels), where=l1 != l0)
            out_t.append(t0 + (t1 - t0) * np.clip(frac, 0.0, 1.0))
            out_u.append(np.repeat(uu[mask], c))
            out_v.append(np.repeat(vv[mask], c))
            out_p.append(np.full(total, pol, dtype=np.int8))

        ref += n_pos * bp + n_neg * bn
        prev = cur

    t_start, t_end = float(times[0]), float(times[-1]) + 1e-9
    if not out_t:
        e = np.empty(0)
        return EventStream(e, e.astype(np.int32), e.astype(np.int32), e.astype(np.int8),
                           w, h, t_start, t_end)
    return _sorted_stream(
        np.concatenate(out_t), np.concatenate(out_u), np.concatenate(out_v),
        np.concatenate(out_p), w, h, t_start, t_end,
    )


def inject_noise(stream, ratio, seed=0):
    """Add floor(ratio * n) spurious events at uniform pixels/times with
    Bernoulli(0.5) polarity; the input stream is untouched."""
    if ratio < 0:
        raise ValueError("ratio must be non-negative")
    n_extra = int(ratio * len(stream))
    if n_extra == 0:
        return stream
    rng = np.random.default_rng(seed)
    t = rng.uniform(stream.t_start, stream.t_end, n_extra)
    t = np.minimum(t, np.nextafter(stream.t_end, -np.inf))
    u = rng.integers(0, stream.width, n_extra)
    v = rng.integers(0, stream.height, n_extra)
    p = np.where(rng.random(n_extra) < 0.5, 1, -1)
    return _sorted_stream(
        np.concatenate([stream.t, t]),
        np.concatenate([stream.u, u.astype(np.int32)]),
        np.concatenate([stream.v, v.astype(np.int32)]),
        np.concatenate([stream.p, p.astype(np.int8)]),
        stream.width, stream.height, stream.t_start, stream.t_end,
    )


# ---------------------------------------------------------------------------
# interval counting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EventCountGrid:
    """Per-pixel positive/negative counts for one time interval."""

    n_pos: np.ndarray
    n_neg: np.ndarray
    j: int
    t0: float
    t1: float


def count_events(stream, interval_times):
    """Bin events into [T_j, T_{j+1}) count grids.

    ``interval_times`` are J+1 strictly increasing boundaries inside the
    stream's span; every event inside [T_0, T_J) lands in exactly one grid.
    """
    times = np.asarray(interval_times, dtype=np.float64)
    if len(times) < 2 or np.any(np.diff(times) <= 0):
        raise ValueError("interval times must be strictly increasing, >= 2 entries")
    if times[0] < stream.t_start - 1e-12 or times[-1] > stream.t_end + 1e-12:
        raise ValueError("interval times outside the stream span")

    h, w = stream.height, stream.width
    j_of = np.searchsorted(times, stream.t, side="right") - 1
    valid = (j_of >= 0) & (stream.t < times[-1])
    j_of = j_of[valid]
    pos = stream.p[valid] > 0
    flat = j_of * (h * w) + stream.v[valid].astype(np.int64) * w + stream.u[valid]
    n_j = len(times) - 1
    pos_counts = np.bincount(flat[pos], minlength=n_j * h * w).reshape(n_j, h, w)
    neg_counts = np.bincount(flat[~pos], minlength=n_j * h * w).reshape(n_j, h, w)
    return [
        EventCountGrid(pos_counts[j].astype(np.int32), neg_counts[j].astype(np.int32),
                       j, float(times[j]), float(times[j + 1]))
        for j in range(n_j)
    ]
