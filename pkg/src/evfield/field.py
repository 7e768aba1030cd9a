"""The implicit radiance field: sinusoidal input encoding, an MLP mapping
(encoded position, encoded direction) to (density, luminance), and exact
reverse-mode gradients for every parameter.

The backward pass is written out by hand against the forward pass below;
``gradcheck`` verifies the pair against central finite differences, which is
the module's contract.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"EVNF"
CHECKPOINT_VERSION = 1


def softplus(z):
    """Overflow-safe log(1 + e^z)."""
    z = np.asarray(z)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def softplus_inv(y):
    return float(np.log(np.expm1(y)))


def sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass(frozen=True)
class EncodingConfig:
    l_x: int = 10
    l_d: int = 4
    include_raw: bool = True

    def __post_init__(self):
        if self.l_x < 1 or self.l_d < 0:
            raise ValueError("need l_x >= 1 and l_d >= 0")

    def dim(self, kind):
        l = self.l_x if kind == "position" else self.l_d
        return (3 if self.include_raw else 0) + 6 * l


def encode(x, cfg, kind="position", dtype=np.float32):
    """Sinusoidal encoding: [x?, sin(2^l pi x), cos(2^l pi x)] for l < L,
    laid out level by level (3 sin components then 3 cos components).

    Positions are expected pre-normalized into [-1, 1]^3 by the scene
    bounds; directions are unit vectors.
    """
    x = np.asarray(x, dtype=dtype)
    l = cfg.l_x if kind == "position" else cfg.l_d
    raw = 3 if cfg.include_raw else 0
    out = np.empty(x.shape[:-1] + (raw + 6 * l,), dtype=dtype)
    if raw:
        out[..., :3] = x
    if l:
        freqs = (np.pi * 2.0 ** np.arange(l)).astype(dtype)
        ang = x[..., None, :] * freqs[:, None]              # (..., L, 3)
        sc = np.stack([np.sin(ang), np.cos(ang)], axis=-2)  # (..., L, 2, 3)
        out[..., raw:] = sc.reshape(x.shape[:-1] + (6 * l,))
    return out


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldConfig:
    depth: int = 8
    width: int = 256
    view_width: int = 0          # 0 -> width // 2
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    sigma_init: float = 0.1
    y_init: float = 0.5

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be positive")
        if self.view_width == 0:
            object.__setattr__(self, "view_width", self.width // 2)

    @property
    def skip_layers(self):
        # concatenate the encoded position into the trunk's middle layer,
        # mirroring the canonical radiance-field layout
        return (self.depth // 2,) if self.depth >= 3 else ()


class FieldParams:
    """Ordered named parameter arrays for one field configuration."""

    def __init__(self, config, arrays):
        self.config = config
        self.arrays = dict(arrays)
        expected = [name for name, _ in field_param_shapes(config)]
        if list(self.arrays) != expected:
            raise ValueError("parameter set does not match the configuration")

    def param_list(self):
        return list(self.arrays.values())

    def names(self):
        return list(self.arrays.keys())

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    @property
    def n_params(self):
        return sum(a.size for a in self.arrays.values())

    def astype(self, dtype):
        return FieldParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self):
        return FieldParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}


def field_param_shapes(config):
    """Canonical (name, shape) order used by checkpoints and optimizers."""
    dx = config.encoding.dim("position")
    dd = config.encoding.dim("direction")
    shapes = []
    in_dim = dx
    for i in range(config.depth):
        if i in config.skip_layers:
            in_dim += dx
        shapes.append((f"trunk.{i}.w", (in_dim, config.width)))
        shapes.append((f"trunk.{i}.b", (config.width,)))
        in_dim = config.width
    shapes += [
        ("sigma.w", (config.width, 1)),
        ("sigma.b", (1,)),
        ("feat.w", (config.width, config.width)),
        ("feat.b", (config.width,)),
        ("view.w", (config.width + dd, config.view_width)),
        ("view.b", (config.view_width,)),
        ("out.w", (config.view_width, 1)),
        ("out.b", (1,)),
    ]
    return shapes


def init_field(config, seed=0, dtype=np.float32):
    """He-style fan-in init for the trunk; output heads start small so the
    field opens near-transparent (sigma ~ sigma_init) and flat (y ~ y_init)."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in field_param_shapes(config):
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape, dtype=dtype)
        elif name in ("sigma.w", "out.w"):
            arrays[name] = rng.uniform(-1e-2, 1e-2, shape).astype(dtype)
        else:
            bound = np.sqrt(6.0 / shape[0])
            arrays[name] = rng.uniform(-bound, bound, shape).astype(dtype)
    arrays["sigma.b"][:] = softplus_inv(config.sigma_init)
    arrays["out.b"][:] = softplus_inv(config.y_init)
    return FieldParams(config, arrays)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

class _Cache:
    __slots__ = ("params_id", "config", "x_enc", "d_enc", "inputs", "h_last",
                 "sigma_pre", "view_in", "view_h", "y_raw", "n")

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)


def field_forward(params, x_enc, d_enc, train_mode=False, rng=None, density_only=False):
    """Evaluate (sigma, y) for a batch of encoded inputs.

    In train mode a fresh standard-normal perturbation is added to the raw
    density before its softplus (it regularizes early training); eval mode
    is deterministic. Returns (sigma, y, cache) with everything the
    backward pass needs. ``density_only`` skips the view branch and returns
    (sigma, None, None), for passes that only need importance weights.
    """
    cfg = params.config
    a = params.arrays
    dt = params.dtype
    x_enc = np.ascontiguousarray(x_enc, dtype=dt)
    if x_enc.shape[-1] != cfg.encoding.dim("position"):
        raise ValueError("encoding dimensions do not match the field configuration")

    h = x_enc
    inputs = []
    for i in range(cfg.depth):
        inp = np.concatenate([h, x_enc], axis=-1) if i in cfg.skip_layers else h
        inputs.append(inp)
        pre = inp @ a[f"trunk.{i}.w"]
        pre += a[f"trunk.{i}.b"]
        h = np.maximum(pre, 0.0, out=pre)

    sigma_pre = (h @ a["sigma.w"])[:, 0] + a["sigma.b"][0]
    if train_mode:
        if rng is None:
            raise ValueError("train_mode requires an rng for the density noise")
        sigma_pre += rng.standard_normal(len(sigma_pre)).astype(dt)
    sigma = softplus(sigma_pre)
    if density_only:
        return sigma, None, None

    d_enc = np.ascontiguousarray(d_enc, dtype=dt)
    if d_enc.shape[-1] != cfg.encoding.dim("direction"):
        raise ValueError("encoding dimensions do not match the field configuration")
    if x_enc.shape[0] != d_enc.shape[0]:
        raise ValueError("position/direction batches must align")
    feat = h @ a["feat.w"]
    feat += a["feat.b"]
    view_in = np.concatenate([feat, d_enc], axis=-1)
    view_pre = view_in @ a["view.w"]
    view_pre += a["view.b"]
    view_h = np.maximum(view_pre, 0.0, out=view_pre)
    y_raw = (view_h @ a["out.w"])[:, 0] + a["out.b"][0]

    y = softplus(y_raw)
    cache = _Cache(params_id=id(params), config=cfg, x_enc=x_enc, d_enc=d_enc,
                   inputs=inputs, h_last=h, sigma_pre=sigma_pre, view_in=view_in,
                   view_h=view_h, y_raw=y_raw, n=len(sigma))
    return sigma, y, cache


def field_backward(params, cache, d_sigma, d_y, grads):
    """Accumulate d(loss)/d(parameter) into ``grads`` given upstream
    cotangents for sigma and y; returns (d_x_enc, d_d_enc)."""
    if cache.params_id != id(params) or cache.config is not params.config:
        raise RuntimeError("stale cache: backward must reuse the forward's parameters")
    cfg = params.config
    a = params.arrays
    dt = params.dtype
    d_sigma = np.asarray(d_sigma, dtype=dt)
    d_y = np.asarray(d_y, dtype=dt)

    g_yraw = (d_y * sigmoid(cache.y_raw))[:, None]
    grads["out.w"] += cache.view_h.T @ g_yraw
    grads["out.b"] += g_yraw.sum(axis=0)
    g_viewpre = g_yraw @ a["out.w"].T
    g_viewpre *= cache.view_h > 0
    grads["view.w"] += cache.view_in.T @ g_viewpre
    grads["view.b"] += g_viewpre.sum(axis=0)
    g_viewin = g_viewpre @ a["view.w"].T
    g_feat = g_viewin[:, : cfg.width]
    g_denc = g_viewin[:, cfg.width :]

    g_sigmaraw = (d_sigma * sigmoid(cache.sigma_pre))[:, None]
    grads["sigma.w"] += cache.h_last.T @ g_sigmaraw
    grads["sigma.b"] += g_sigmaraw.sum(axis=0)
    grads["feat.w"] += cache.h_last.T @ g_feat
    grads["feat.b"] += g_feat.sum(axis=0)

    g_h = g_sigmaraw @ a["sigma.w"].T
    g_h += g_feat @ a["feat.w"].T
    g_xenc = np.zeros_like(cache.x_enc)
    dx = cfg.encoding.dim("position")
    for i in reversed(range(cfg.depth)):
        # post-activation of layer i is the next layer's input (or its
        # leading columns at a skip layer), falling back to h_last on top
        if i + 1 < cfg.depth:
            nxt = cache.inputs[i + 1]
            h_i = nxt[:, :-dx] if (i + 1) in cfg.skip_layers else nxt
        else:
            h_i = cache.h_last
        g_h *= h_i > 0
        grads[f"trunk.{i}.w"] += cache.inputs[i].T @ g_h
        grads[f"trunk.{i}.b"] += g_h.sum(axis=0)
        g_inp = g_h @ a[f"trunk.{i}.w"].T
        if i in cfg.skip_layers:
            g_h = np.ascontiguousarray(g_inp[:, :-dx])
            g_xenc += g_inp[:, -dx:]
        else:
            g_h = g_inp
    g_xenc += g_h
    return g_xenc, g_denc


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIIIII")  # magic, version, D, W, Lx, Ld, flags, view_w, n_intervals


def save_checkpoint(path, params, log_thresholds):
    """Binary checkpoint: header, f32 parameters in canonical order, per-
    interval thresholds in the log-magnitude parameterization, CRC32."""
    cfg = params.config
    log_thresholds = np.asarray(log_thresholds, dtype=np.float32).reshape(-1, 2)
    flags = 1 if cfg.encoding.include_raw else 0
    blob = bytearray(
        _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg.depth, cfg.width,
                     cfg.encoding.l_x, cfg.encoding.l_d, flags, cfg.view_width,
                     log_thresholds.shape[0])
    )
    for arr in params.param_list():
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    blob += np.ascontiguousarray(log_thresholds, dtype="<f4").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (FieldParams, log_thresholds)."""
    from .errors import DataError

    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size + 4:
        raise DataError(f"{path}: truncated checkpoint")
    magic, version, depth, width, l_x, l_d, flags, view_w, n_int = _HEADER.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    crc_stored = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc_stored:
        raise DataError(f"{path}: CRC mismatch, file corrupt")

    cfg = FieldConfig(depth=depth, width=width, view_width=view_w,
                      encoding=EncodingConfig(l_x=l_x, l_d=l_d, include_raw=bool(flags & 1)))
    offset = _HEADER.size
    arrays = {}
    for name, shape in field_param_shapes(cfg):
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        offset += 4 * n
    thr = np.frombuffer(blob, dtype="<f4", count=2 * n_int, offset=offset).reshape(n_int, 2).copy()
    offset += 8 * n_int
    if offset != len(blob) - 4:
        raise DataError(f"{path}: size mismatch, file corrupt")
    return FieldParams(cfg, arrays), thr
