import numpy as np
import pytest
from scipy.integrate import quad

from evfield.geometry import CameraIntrinsics, Pose
from evfield.pipeline import make_intrinsics
from evfield.scenes import (AnalyticScene, Box, Sphere, builtin_scene,
                            checker_texture, constant_texture, gt_render,
                            scene_preset)

INTR = CameraIntrinsics(80.0, 80.0, 16.0, 16.0, 32, 32)


def center_pixel_frame(scene, near, far, n_steps):
    return gt_render(scene, INTR, Pose.identity(), near, far, n_steps=n_steps)


def slab_scene(sigma=2.0, z0=2.0, extent=1.0, y0=1.0, background=0.0):
    return AnalyticScene(
        [Box((-50, -50, z0), (50, 50, z0 + extent), sigma, constant_texture(y0))],
        background=background,
    )


class TestGtRender:
    def test_empty_scene_background(self):
        frame = center_pixel_frame(AnalyticScene([], background=0.7), 0.5, 4.0, 64)
        np.testing.assert_allclose(frame.intensity, 0.7, atol=1e-12)
        np.testing.assert_allclose(frame.opacity, 0.0, atol=1e-12)
        np.testing.assert_allclose(frame.depth, 0.0, atol=1e-12)

    def test_slab_closed_form_intensity(self):
        sigma, extent, y0 = 2.0, 1.0, 1.0
        frame = center_pixel_frame(slab_scene(sigma, 2.0, extent, y0), 0.5, 6.0, 1024)
        expected = y0 * (1.0 - np.exp(-sigma * extent))
        got = frame.intensity[15, 15]  # cy-0.5, cx-0.5 -> axial ray
        assert abs(got - expected) / expected < 1e-3

    def test_slab_normalized_depth_quadrature_oracle(self):
        sigma, z0, extent = 2.0, 2.0, 1.0
        frame = center_pixel_frame(slab_scene(sigma, z0, extent), 0.5, 6.0, 1024)
        norm, _ = quad(lambda s: sigma * np.exp(-sigma * (s - z0)), z0, z0 + extent)
        want, _ = quad(lambda s: s * sigma * np.exp(-sigma * (s - z0)), z0, z0 + extent)
        assert abs(frame.depth_norm[15, 15] - want / norm) < 1e-2

    def test_opaque_sphere_depth(self):
        # ray-sphere oracle: first hit at distance (center distance - radius)
        dist, radius, n_steps = 3.0, 0.8, 1024
        scene = AnalyticScene(
            [Sphere((0, 0, dist), radius, 500.0, constant_texture(1.0))], background=0.0
        )
        frame = center_pixel_frame(scene, 0.5, 6.0, n_steps)
        tol = 2.0 / n_steps * (6.0 - 0.5)
        assert abs(frame.depth_norm[15, 15] - (dist - radius)) < tol

    def test_deterministic(self):
        scene = builtin_scene("sphere_plane")
        preset = scene_preset("sphere_plane")
        a = gt_render(scene, INTR, Pose.identity(), preset.near, preset.far, 128)
        b = gt_render(scene, INTR, Pose.identity(), preset.near, preset.far, 128)
        assert np.array_equal(a.intensity, b.intensity)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.opacity, b.opacity)

    def test_richardson_convergence(self):
        vals = {}
        for n in (128, 256, 512):
            vals[n] = center_pixel_frame(slab_scene(), 0.5, 6.0, n).intensity[15, 15]
        assert abs(vals[512] - vals[256]) < abs(vals[256] - vals[128])

    def test_opacity_matches_optical_depth(self):
        scene = slab_scene(sigma=1.3)
        near, far, n = 0.5, 6.0, 256
        frame = center_pixel_frame(scene, near, far, n)
        step = (far - near) / n
        s = near + (np.arange(n) + 0.5) * step
        pts = np.stack([np.zeros(n), np.zeros(n), s], axis=-1)
        sigma, _ = scene.fields_at(pts)
        expected = 1.0 - np.exp(-np.sum(sigma * step))
        assert abs(frame.opacity[15, 15] - expected) < 1e-9

    def test_rejects_coarse_oracle(self):
        with pytest.raises(ValueError):
            center_pixel_frame(slab_scene(), 0.5, 6.0, 32)


class TestBuiltinScenes:
    def test_slab_single_primitive(self):
        assert len(builtin_scene("slab").primitives) == 1

    def test_hdr_luminance_span(self):
        scene = builtin_scene("hdr_boxes")
        lums = []
        for prim in scene.primitives:
            pts = 0.5 * (prim.lo + prim.hi) if isinstance(prim, Box) else prim.center
            lums.append(float(prim.luminance(np.asarray(pts)[None])[0]))
        assert max(lums) / min(lums) == pytest.approx(1e4)

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            builtin_scene("volcano")
        with pytest.raises(ValueError):
            scene_preset("volcano")

    def test_sphere_plane_orbit_coverage(self, tiny_dataset):
        # >= 30% of pixels see geometry from the orbit viewpoints
        from evfield.pipeline import oracle_frames
        frame = oracle_frames(tiny_dataset, [tiny_dataset.poses[0]], gt_steps=128)[0]
        assert (frame.opacity > 0.5).mean() >= 0.30

    def test_checker_texture_alternates(self):
        tex = checker_texture(1.0, 0.2, 0.8)
        vals = tex(np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5], [1.5, 1.5, 0.5]]))
        np.testing.assert_allclose(vals, [0.2, 0.8, 0.2])
