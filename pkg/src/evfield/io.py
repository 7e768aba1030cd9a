"""File formats: IJRR-style event and pose text files, 16-bit PGM images,
the EVF1 float frame container, and the INI-style run configuration.

Text formats round-trip exactly (floats are written with shortest-repr
decimals); malformed input raises DataError with the offending line number.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError
from .events import EventStream, make_stream
from .geometry import Pose


# ---------------------------------------------------------------------------
# events: one per line `t u v p`, p in {0, 1} on disk (0 -> -1, 1 -> +1)
# ---------------------------------------------------------------------------

def write_events(path, stream):
    with open(path, "w") as fh:
        fh.write(f"# {stream.width} {stream.height}\n")
        p01 = (stream.p > 0).astype(np.int8)
        for t, u, v, p in zip(stream.t, stream.u, stream.v, p01):
            fh.write(f"{float(t)!r} {u} {v} {p}\n")


def read_events(path, width=None, height=None):
    """Read an event file; dimensions come from the `# width height` comment
    unless given explicitly (files without the comment need both)."""
    ts, us, vs, ps = [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                fields = line[1:].split()
                if lineno == 1 and len(fields) == 2 and width is None:
                    try:
                        width, height = int(fields[0]), int(fields[1])
                    except ValueError:
                        raise DataError(f"{path}:{lineno}: bad dimension comment") from None
                continue
            fields = line.split()
            if len(fields) != 4:
                raise DataError(f"{path}:{lineno}: expected `t u v p`, got {line!r}")
            try:
                ts.append(float(fields[0]))
                us.append(int(fields[1]))
                vs.append(int(fields[2]))
                p = int(fields[3])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
            if p not in (0, 1):
                raise DataError(f"{path}:{lineno}: polarity must be 0 or 1, got {p}")
            ps.append(1 if p == 1 else -1)
    if width is None or height is None:
        raise DataError(f"{path}: sensor dimensions unknown (no header comment, none given)")
    u = np.array(us, dtype=np.int32)
    v = np.array(vs, dtype=np.int32)
    if len(u) and (u.min() < 0 or u.max() >= width or v.min() < 0 or v.max() >= height):
        raise DataError(f"{path}: event pixel outside {width}x{height} sensor")
    return make_stream(np.array(ts), u, v, np.array(ps, dtype=np.int8), width, height)


# ---------------------------------------------------------------------------
# poses: one per line `t tx ty tz qx qy qz qw`
# ---------------------------------------------------------------------------

def write_poses(path, times, poses):
    with open(path, "w") as fh:
        for t, pose in zip(times, poses):
            tx, ty, tz = (float(x) for x in pose.translation)
            qx, qy, qz, qw = (float(x) for x in pose.rotation)
            fh.write(f"{float(t)!r} {tx!r} {ty!r} {tz!r} {qx!r} {qy!r} {qz!r} {qw!r}\n")


def read_poses(path):
    """Returns (times (N,), [Pose] * N)."""
    times, poses = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 8:
                raise DataError(f"{path}:{lineno}: expected `t tx ty tz qx qy qz qw`")
            try:
                vals = [float(x) for x in fields]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric field") from None
            times.append(vals[0])
            poses.append(Pose(np.array(vals[4:8]), np.array(vals[1:4])))
    return np.array(times), poses


def parse_pose_line(text):
    """A single `t tx ty tz qx qy qz qw` string (CLI --pose flag)."""
    fields = text.split()
    if len(fields) != 8:
        raise DataError("pose must be 8 numbers: t tx ty tz qx qy qz qw")
    try:
        vals = [float(x) for x in fields]
    except ValueError:
        raise DataError(f"non-numeric pose field in {text!r}") from None
    return vals[0], Pose(np.array(vals[4:8]), np.array(vals[1:4]))


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def write_pgm16(path, image, scale=None):
    """16-bit binary PGM; values are stored as round(image * scale). The
    scale is kept in a header comment so readers can undo it."""
    image = np.asarray(image, dtype=np.float64)
    if scale is None:
        peak = image.max()
        scale = 65535.0 / peak if peak > 0 else 1.0
    data = np.clip(np.round(image * scale), 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(b"P5\n")
        fh.write(f"# scale {scale!r}\n".encode())
        fh.write(f"{image.shape[1]} {image.shape[0]}\n65535\n".encode())
        fh.write(data.tobytes())


def read_pgm16(path):
    """Returns (image, scale) with the stored linear scaling undone."""
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        if not blob.startswith(b"P5"):
            raise DataError(f"{path}: not a binary PGM")
        parts = []
        pos = 2
        scale = 1.0
        while len(parts) < 3:
            while pos < len(blob) and blob[pos : pos + 1].isspace():
                pos += 1
            if blob[pos : pos + 1] == b"#":
                end = blob.index(b"\n", pos)
                comment = blob[pos + 1 : end].split()
                if comment and comment[0] == b"scale":
                    scale = float(comment[1])
                pos = end + 1
                continue
            end = pos
            while end < len(blob) and not blob[end : end + 1].isspace():
                end += 1
            parts.append(int(blob[pos:end]))
            pos = end
        pos += 1
        w, h, maxval = parts
        if maxval != 65535:
            raise DataError(f"{path}: expected 16-bit PGM (maxval 65535)")
        data = np.frombuffer(blob, dtype=">u2", count=w * h, offset=pos).reshape(h, w)
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed PGM ({exc})") from None
    return data.astype(np.float64) / scale, scale


EVF_MAGIC = b"EVF1"
_EVF_HEADER = struct.Struct("<4sIII")  # magic, width, height, channels (16 bytes)


def write_frame_bin(path, channels):
    """EVF1 container: 16-byte header then little-endian float32 planes."""
    channels = [np.asarray(c) for c in channels]
    h, w = channels[0].shape
    for c in channels:
        if c.shape != (h, w):
            raise ValueError("all channels must share a shape")
    with open(path, "wb") as fh:
        fh.write(_EVF_HEADER.pack(EVF_MAGIC, w, h, len(channels)))
        for c in channels:
            fh.write(np.ascontiguousarray(c, dtype="<f4").tobytes())


def read_frame_bin(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _EVF_HEADER.size:
        raise DataError(f"{path}: truncated frame file")
    magic, w, h, n_ch = _EVF_HEADER.unpack_from(blob, 0)
    if magic != EVF_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    expect = _EVF_HEADER.size + 4 * w * h * n_ch
    if len(blob) != expect:
        raise DataError(f"{path}: size mismatch (got {len(blob)}, want {expect})")
    flat = np.frombuffer(blob, dtype="<f4", offset=_EVF_HEADER.size)
    return [flat[i * w * h : (i + 1) * w * h].reshape(h, w).astype(np.float64) for i in range(n_ch)]


# ---------------------------------------------------------------------------
# run configuration: INI sections [scene] [camera] [sim] [train] [eval]
# ---------------------------------------------------------------------------

RUN_CONFIG_KEYS = {
    "scene": {"name", "background"},
    "camera": {"width", "height", "fov_deg", "near", "far"},
    "sim": {"intervals", "fps", "b_plus", "b_minus", "noise_ratio",
            "threshold_jitter_sigma", "gt_steps"},
    "train": {"learning_rate", "batch_rays", "iterations", "lam", "n_coarse", "n_fine",
              "noise_injection_ratio", "joint_thresholds", "threshold_init",
              "fixed_threshold", "bound", "grad_clip", "lr_decay", "seed",
              "depth", "width", "l_x", "l_d", "log_every", "checkpoint_every"},
    "eval": {"n_novel", "novel_elevation_offset_deg", "gt_steps"},
}

_BOOL_KEYS = {"joint_thresholds"}
_INT_KEYS = {"width", "height", "intervals", "fps", "gt_steps", "batch_rays", "iterations",
             "n_coarse", "n_fine", "seed", "depth", "l_x", "l_d", "log_every",
             "checkpoint_every", "n_novel"}
_STR_KEYS = {"name"}


def read_run_config(path):
    """Parse and validate; unknown sections/keys abort with the line number."""
    config = {section: {} for section in RUN_CONFIG_KEYS}
    section = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].split(";", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in RUN_CONFIG_KEYS:
                    raise DataError(f"{path}:{lineno}: unknown section [{section}]")
                continue
            if section is None:
                raise DataError(f"{path}:{lineno}: key before any [section]")
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected `key = value`")
            key, _, value = (s.strip() for s in line.partition("="))
            if key not in RUN_CONFIG_KEYS[section]:
                raise DataError(f"{path}:{lineno}: unknown key {key!r} in [{section}]")
            try:
                if key in _STR_KEYS:
                    config[section][key] = value
                elif key in _BOOL_KEYS:
                    if value.lower() not in ("true", "false", "0", "1", "on", "off"):
                        raise ValueError(value)
                    config[section][key] = value.lower() in ("true", "1", "on")
                elif key in _INT_KEYS:
                    config[section][key] = int(value)
                else:
                    config[section][key] = float(value)
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return config
