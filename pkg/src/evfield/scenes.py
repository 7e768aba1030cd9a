"""Analytic test scenes with known density/luminance and a dense ray-march
ground-truth renderer.

The renderer here is the evaluation oracle for the whole pipeline: it uses
deterministic midpoint sampling (no jitter, no network) and the same
compositing equations as the differentiable renderer, so discrepancies
between the two isolate learning error from quadrature error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Pose, pixel_direction_cam, quat_rotate


# ---------------------------------------------------------------------------
# procedural luminance textures (world-space, view independent)
# ---------------------------------------------------------------------------

class constant_texture:
    def __init__(self, value):
        self.value = float(value)

    def __call__(self, pts):
        return np.full(pts.shape[:-1], self.value)


class checker_texture:
    """3D checkerboard: parity of the summed integer lattice cell."""

    def __init__(self, scale, lo, hi):
        self.scale = float(scale)
        self.lo = float(lo)
        self.hi = float(hi)

    def __call__(self, pts):
        cells = np.floor(pts / self.scale).astype(np.int64)
        parity = (cells[..., 0] + cells[..., 1] + cells[..., 2]) % 2
        return np.where(parity == 0, self.lo, self.hi)


class radial_texture:
    """Linear radial gradient from ``inner`` at center to ``outer`` at radius."""

    def __init__(self, center, inner, outer, radius):
        self.center = np.asarray(center, dtype=np.float64)
        self.inner = float(inner)
        self.outer = float(outer)
        self.radius = float(radius)

    def __call__(self, pts):
        r = np.linalg.norm(pts - self.center, axis=-1)
        t = np.clip(r / self.radius, 0.0, 1.0)
        return self.inner + (self.outer - self.inner) * t


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

class Sphere:
    def __init__(self, center, radius, density, luminance):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.density = float(density)
        self.luminance = luminance

    def inside(self, pts):
        d = pts - self.center
        return (d * d).sum(axis=-1) <= self.radius * self.radius

    def density_at(self, pts):
        return np.where(self.inside(pts), self.density, 0.0)


class Box:
    """Axis-aligned box; infinite extents (np.inf bounds) make a plane slab."""

    def __init__(self, lo, hi, density, luminance):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.density = float(density)
        self.luminance = luminance

    def inside(self, pts):
        m = (pts[..., 0] >= self.lo[0]) & (pts[..., 0] <= self.hi[0])
        m &= (pts[..., 1] >= self.lo[1]) & (pts[..., 1] <= self.hi[1])
        m &= (pts[..., 2] >= self.lo[2]) & (pts[..., 2] <= self.hi[2])
        return m

    def density_at(self, pts):
        return np.where(self.inside(pts), self.density, 0.0)


@dataclass
class AnalyticScene:
    """Union of primitives; overlapping densities add, emission mixes
    proportionally to density."""

    primitives: list
    background: float = 0.0

    def fields_at(self, pts):
        """(sigma, luminance) at points (..., 3); textures are only touched
        where a primitive actually covers the point."""
        pts = np.asarray(pts, dtype=np.float64)
        sigma = np.zeros(pts.shape[:-1])
        weighted_y = np.zeros(pts.shape[:-1])
        for prim in self.primitives:
            mask = prim.inside(pts)
            if not mask.any():
                continue
            sigma[mask] += prim.density
            weighted_y[mask] += prim.density * prim.luminance(pts[mask])
        y = np.divide(weighted_y, sigma, out=np.zeros_like(sigma), where=sigma > 0)
        return sigma, y


# ---------------------------------------------------------------------------
# ground-truth rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GtFrame:
    """Oracle render: linear intensity, two depth channels, opacity."""

    intensity: np.ndarray
    depth: np.ndarray        # raw weight-sum depth, biased on soft pixels
    depth_norm: np.ndarray   # opacity-normalized depth, use with mask
    opacity: np.ndarray
    timestamp: float
    pose: Pose


def gt_render(scene, intr, pose, near, far, n_steps=256, timestamp=0.0):
    """Deterministic dense ray march; same compositing as the trained model.

    Midpoints of ``n_steps`` equal sub-intervals of [near, far] are
    composited front to back; residual transmittance blends the scene
    background into the intensity channel.
    """
    if n_steps < 64:
        raise ValueError("n_steps must be at least 64 for a trustworthy oracle")
    h, w = intr.height, intr.width
    d_cam = pixel_direction_cam(intr, *np.meshgrid(np.arange(w), np.arange(h), indexing="xy"))
    dirs = quat_rotate(pose.rotation, d_cam.reshape(-1, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)

    step = (far - near) / n_steps
    s = near + (np.arange(n_steps) + 0.5) * step

    intensity = np.empty(h * w)
    depth = np.empty(h * w)
    opacity = np.empty(h * w)
    chunk = max(1, (1 << 22) // n_steps)
    for i0 in range(0, h * w, chunk):
        d = dirs[i0 : i0 + chunk]
        pts = pose.translation + d[:, None, :] * s[None, :, None]
        sigma, y = scene.fields_at(pts)
        alpha = 1.0 - np.exp(-sigma * step)
        trans = np.exp(-np.cumsum(sigma * step, axis=-1) + sigma * step)  # exclusive
        weights = trans * alpha
        acc = weights.sum(axis=-1)
        intensity[i0 : i0 + chunk] = (weights * y).sum(axis=-1) + (1.0 - acc) * scene.background
        depth[i0 : i0 + chunk] = (weights * s).sum(axis=-1)
        opacity[i0 : i0 + chunk] = acc

    intensity = intensity.reshape(h, w)
    depth = depth.reshape(h, w)
    opacity = opacity.reshape(h, w)
    depth_norm = depth / np.maximum(opacity, 1e-6)
    return GtFrame(intensity, depth, depth_norm, opacity, timestamp, pose)


# ---------------------------------------------------------------------------
# built-in scenes and their camera/bounds presets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenePreset:
    """Per-scene camera geometry defaults shared by simulation and training."""

    orbit_center: tuple
    orbit_radius: float
    elevation_deg: float
    near: float
    far: float
    aabb_center: tuple
    aabb_half: float
    fov_deg: float = 45.0


_PRESETS = {
    "slab": ScenePreset(
        orbit_center=(0.0, 0.0, 2.5),
        orbit_radius=3.0,
        elevation_deg=0.0,
        near=0.5,
        far=6.0,
        aabb_center=(0.0, 0.0, 2.5),
        aabb_half=3.5,
    ),
    "sphere_plane": ScenePreset(
        orbit_center=(0.0, 0.0, 0.45),
        orbit_radius=3.2,
        elevation_deg=28.0,
        near=1.4,
        far=5.4,
        aabb_center=(0.0, 0.0, 0.45),
        aabb_half=2.2,
    ),
    "hdr_boxes": ScenePreset(
        orbit_center=(0.0, 0.0, 0.4),
        orbit_radius=3.2,
        elevation_deg=30.0,
        near=1.4,
        far=5.4,
        aabb_center=(0.0, 0.0, 0.4),
        aabb_half=2.2,
    ),
}


def scene_preset(name):
    if name not in _PRESETS:
        raise ValueError(f"unknown scene {name!r}; choose from {sorted(_PRESETS)}")
    return _PRESETS[name]


def builtin_scene(name):
    """Named scenes: 'slab', 'sphere_plane', 'hdr_boxes'."""
    if name == "slab":
        # homogeneous box, the analytic-compositing workhorse
        return AnalyticScene(
            primitives=[Box((-50.0, -50.0, 2.0), (50.0, 50.0, 3.0), 2.0, constant_texture(1.0))],
            background=0.2,
        )
    if name == "sphere_plane":
        sphere = Sphere(
            (0.0, 0.0, 0.62), 0.52, 14.0,
            checker_texture(0.26, 0.22, 1.05),
        )
        ground = Box(
            (-1.6, -1.6, -0.3), (1.6, 1.6, 0.0), 14.0,
            checker_texture(0.55, 0.35, 0.85),
        )
        pillar = Box(
            (0.75, -1.05, 0.0), (1.15, -0.65, 0.75), 14.0,
            radial_texture((0.95, -0.85, 0.4), 1.1, 0.3, 0.8),
        )
        return AnalyticScene(primitives=[sphere, ground, pillar], background=0.18)
    if name == "hdr_boxes":
        # luminances span four decades: 1e-2 .. 1e2
        levels = [1e-2, 1e-1, 1e0, 1e1, 1e2]
        xs = np.linspace(-1.1, 1.1, len(levels))
        prims = [
            Box((x - 0.22, -0.3, 0.0), (x + 0.22, 0.3, 0.85), 14.0, constant_texture(lv))
            for x, lv in zip(xs, levels)
        ]
        prims.append(Box((-1.6, -1.6, -0.3), (1.6, 1.6, 0.0), 14.0, constant_texture(0.4)))
        return AnalyticScene(primitives=prims, background=0.05)
    raise ValueError(f"unknown scene {name!r}; choose from {sorted(_PRESETS)}")
