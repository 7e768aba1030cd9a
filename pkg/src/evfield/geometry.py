"""Pinhole cameras, SE(3) poses, and per-pixel ray generation.

Conventions (fixed for the whole library, see README):

* camera frame: +z forward, +x right, +y down;
* a pixel (u, v) is sampled through its center (u + 0.5, v + 0.5);
* quaternions are stored as (qx, qy, qz, qw) and rotate camera-frame
  vectors into the world frame (world-from-camera);
* pose translation is the camera center in world coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_UNIT_TOL = 1e-9


# ---------------------------------------------------------------------------
# quaternion helpers (x, y, z, w)
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("cannot normalize a zero quaternion")
    return q / n


def quat_rotate(q, v):
    """Rotate vectors ``v`` (..., 3) by unit quaternions ``q`` (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    xyz = q[..., :3]
    w = q[..., 3:4]
    t = 2.0 * np.cross(xyz, v)
    return v + w * t + np.cross(xyz, t)


def quat_conj(q):
    q = np.asarray(q, dtype=np.float64)
    out = q.copy()
    out[..., :3] *= -1.0
    return out


def quat_mul(a, b):
    ax, ay, az, aw = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bx, by, bz, bw = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=-1,
    )


def quat_to_matrix(q):
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def matrix_to_quat(m):
    """Rotation matrix (3, 3) to quaternion (x, y, z, w), w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    # Shepperd's method: pick the largest diagonal combination for stability.
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s, 0.25 * s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s, (m[2, 1] - m[1, 2]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s, (m[0, 2] - m[2, 0]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s, (m[1, 0] - m[0, 1]) / s])
    if q[3] < 0:
        q = -q
    return quat_normalize(q)


def quat_slerp(a, b, t):
    """Spherical interpolation along the shorter arc; exact at t = 0 and 1."""
    a = quat_normalize(a)
    b = quat_normalize(b)
    dot = float(np.dot(a, b))
    if dot < 0.0:
        b = -b
        dot = -dot
    if t == 0.0:
        return a
    if t == 1.0:
        return b
    if dot > 0.9995:
        return quat_normalize(a + t * (b - a))
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    s = np.sin(theta)
    return quat_normalize((np.sin((1.0 - t) * theta) / s) * a + (np.sin(t * theta) / s) * b)


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole model: focal lengths, principal point, resolution (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside sensor")


def _as_locked(a, shape):
    a = np.array(a, dtype=np.float64).reshape(shape)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Pose:
    """World-from-camera rotation (unit quaternion) and camera center."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_locked(quat_normalize(self.rotation), (4,)))
        object.__setattr__(self, "translation", _as_locked(self.translation, (3,)))

    @staticmethod
    def identity():
        return Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    def matrix(self):
        """4x4 camera-to-world transform."""
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        object.__setattr__(self, "origin", _as_locked(self.origin, (3,)))
        object.__setattr__(self, "direction", _as_locked(self.direction, (3,)))
        if abs(np.linalg.norm(self.direction) - 1.0) > _UNIT_TOL:
            raise ValueError("ray direction must be unit length")
        if not (0 < self.near < self.far):
            raise ValueError("require 0 < near < far")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def pixel_direction_cam(intr, u, v):
    """Camera-frame direction through pixel center(s), not normalized."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.stack(
        [
            (u + 0.5 - intr.cx) / intr.fx,
            (v + 0.5 - intr.cy) / intr.fy,
            np.ones_like(u),
        ],
        axis=-1,
    )


def ray_for_pixel(intr, pose, u, v, near=0.1, far=10.0):
    """World-space ray through pixel (u, v); fractional coordinates allowed."""
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise ValueError(f"pixel ({u}, {v}) outside {intr.width}x{intr.height} sensor")
    d = quat_rotate(pose.rotation, pixel_direction_cam(intr, u, v))
    d = d / np.linalg.norm(d)
    return Ray(pose.translation, d, near, far)


def rays_for_pixels(intr, rotations, translations, u, v):
    """Batched rays: per-ray poses as (K, 4) quaternions and (K, 3) centers.

    Returns (origins (K, 3), unit directions (K, 3)).
    """
    d_cam = pixel_direction_cam(intr, u, v)
    d = quat_rotate(rotations, d_cam)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    origins = np.broadcast_to(translations, d.shape).copy()
    return origins, d


def look_at_quat(eye, target, up=(0.0, 0.0, 1.0)):
    """World-from-camera rotation pointing +z at target (+y down in image)."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(f, up)
    if np.linalg.norm(x) < 1e-8:
        # looking along the up axis: fall back to a fixed lateral axis
        x = np.cross(f, np.array([1.0, 0.0, 0.0]))
    x = x / np.linalg.norm(x)
    y = np.cross(f, x)
    return matrix_to_quat(np.stack([x, y, f], axis=1))


def orbit_trajectory(center, radius, elevation_deg, n, start_azimuth_deg=0.0):
    """n poses on a circle at fixed elevation, looking at ``center``.

    Azimuths are evenly spaced over [0, 2pi); the orbit circles the world
    +z axis.
    """
    if n < 2:
        raise ValueError("an orbit needs at least 2 poses")
    if radius <= 0:
        raise ValueError("radius must be positive")
    center = np.asarray(center, dtype=np.float64)
    el = np.deg2rad(elevation_deg)
    poses = []
    for k in range(n):
        az = np.deg2rad(start_azimuth_deg) + 2.0 * np.pi * k / n
        offset = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        eye = center + offset
        poses.append(Pose(look_at_quat(eye, center), eye))
    return poses


def interpolate_pose(a, b, t):
    """Slerp rotation / lerp translation; exact endpoints at t = 0 and 1."""
    if not (0.0 <= t <= 1.0):
        raise ValueError("t must lie in [0, 1]")
    if t == 0.0:
        return a
    if t == 1.0:
        return b
    return Pose(
        quat_slerp(a.rotation, b.rotation, t),
        (1.0 - t) * a.translation + t * b.translation,
    )
