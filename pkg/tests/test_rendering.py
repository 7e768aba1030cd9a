import numpy as np
import pytest
from scipy.stats import chisquare

from evfield.gradcheck import check_composite
from evfield.rendering import (RaySamples, composite, composite_backward,
                               sample_importance, sample_stratified)

ORIGIN = np.zeros((1, 3))
DIR = np.array([[0.0, 0.0, 1.0]])


def make_samples(s, near, far):
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    delta = np.concatenate([np.diff(s, axis=-1), np.maximum(far - s[:, -1:], 1e-12)], axis=-1)
    x = ORIGIN[:, None, :] + DIR[:, None, :] * s[..., None]
    return RaySamples(s, x, delta, near, far)


class TestStratified:
    def test_midpoints(self):
        rs = sample_stratified(ORIGIN, DIR, 0.0, 1.0, 4)
        np.testing.assert_allclose(rs.s[0], [0.125, 0.375, 0.625, 0.875], atol=1e-15)

    def test_jitter_stays_in_bins(self):
        rng = np.random.default_rng(0)
        rs = sample_stratified(np.zeros((64, 3)), np.tile(DIR, (64, 1)), 2.0, 6.0, 16,
                               rng=rng, jitter=True)
        edges = 2.0 + 4.0 * np.arange(17) / 16
        assert np.all(rs.s >= edges[:-1]) and np.all(rs.s <= edges[1:])

    def test_empirical_mean_hits_bin_centers(self):
        n_draws, n_bins = 100_000, 8
        rng = np.random.default_rng(1)
        rs = sample_stratified(np.zeros((n_draws, 3)), np.tile(DIR, (n_draws, 1)),
                               0.0, 1.0, n_bins, rng=rng, jitter=True)
        centers = (np.arange(n_bins) + 0.5) / n_bins
        tol = 3.0 * (1.0 / n_bins) / np.sqrt(12 * n_draws)
        assert np.abs(rs.s.mean(axis=0) - centers).max() < tol

    def test_deterministic_under_seed(self):
        a = sample_stratified(ORIGIN, DIR, 0.0, 1.0, 8, rng=np.random.default_rng(5), jitter=True)
        b = sample_stratified(ORIGIN, DIR, 0.0, 1.0, 8, rng=np.random.default_rng(5), jitter=True)
        assert np.array_equal(a.s, b.s)

    def test_rejects_tiny_n(self):
        with pytest.raises(ValueError):
            sample_stratified(ORIGIN, DIR, 0.0, 1.0, 1)


class TestImportance:
    def test_single_hot_bin(self):
        coarse = sample_stratified(ORIGIN, DIR, 0.0, 1.0, 16)
        w = np.zeros((1, 16))
        w[0, 5] = 1.0
        rng = np.random.default_rng(2)
        merged = sample_importance(ORIGIN, DIR, coarse, w, 64, rng=rng)
        fine = np.setdiff1d(merged.s[0], coarse.s[0])
        lo = 0.5 * (coarse.s[0, 4] + coarse.s[0, 5])
        hi = 0.5 * (coarse.s[0, 5] + coarse.s[0, 6])
        inside = (fine >= lo) & (fine <= hi)
        assert inside.mean() > 0.99

    def test_uniform_weights_chi_square(self):
        n_rays, n_fine = 2_000, 50
        coarse = sample_stratified(np.zeros((n_rays, 3)), np.tile(DIR, (n_rays, 1)),
                                   0.0, 1.0, 10)
        w = np.ones((n_rays, 10))
        merged = sample_importance(np.zeros((n_rays, 3)), np.tile(DIR, (n_rays, 1)),
                                   coarse, w, n_fine, rng=np.random.default_rng(3))
        fine = np.setdiff1d(merged.s.ravel(), coarse.s[0])
        hist, _ = np.histogram(fine, bins=10, range=(0.0, 1.0))
        assert chisquare(hist).pvalue > 0.01

    def test_merged_sorted_unique(self):
        rng = np.random.default_rng(4)
        coarse = sample_stratified(np.zeros((32, 3)), np.tile(DIR, (32, 1)), 0.5, 3.5, 24,
                                   rng=rng, jitter=True)
        sigma = rng.uniform(0, 2, (32, 24))
        res = composite(sigma, np.ones((32, 24)), coarse)
        merged = sample_importance(np.zeros((32, 3)), np.tile(DIR, (32, 1)),
                                   coarse, res.weights, 24, rng=rng)
        gaps = np.diff(merged.s, axis=-1)
        assert gaps.min() >= 1e-12

    def test_zero_weights_fall_back_uniform(self):
        coarse = sample_stratified(ORIGIN, DIR, 0.0, 1.0, 8)
        merged = sample_importance(ORIGIN, DIR, coarse, np.zeros((1, 8)), 32,
                                   rng=np.random.default_rng(6))
        assert merged.s.shape == (1, 40)
        fine = np.setdiff1d(merged.s[0], coarse.s[0])
        assert fine.min() < 0.2 and fine.max() > 0.8

    def test_deterministic_quantiles_without_rng(self):
        coarse = sample_stratified(ORIGIN, DIR, 0.0, 1.0, 8)
        w = np.ones((1, 8))
        a = sample_importance(ORIGIN, DIR, coarse, w, 16)
        b = sample_importance(ORIGIN, DIR, coarse, w, 16)
        assert np.array_equal(a.s, b.s)

    def test_rejects_negative_weights(self):
        coarse = sample_stratified(ORIGIN, DIR, 0.0, 1.0, 4)
        with pytest.raises(ValueError):
            sample_importance(ORIGIN, DIR, coarse, np.array([[1.0, -0.1, 0, 0]]), 4)


class TestComposite:
    def test_vacuum(self):
        rs = make_samples([0.2, 0.4, 0.6], 0.1, 1.0)
        res = composite(np.zeros((1, 3)), np.ones((1, 3)), rs)
        assert res.intensity[0] == 0 and res.depth[0] == 0 and res.opacity[0] == 0

    def test_opaque_first_sample(self):
        rs = make_samples([0.5, 1.0, 1.5], 0.1, 2.0)
        sigma = np.array([[1e8, 1.0, 1.0]])
        y = np.array([[0.75, 0.2, 0.9]])
        res = composite(sigma, y, rs)
        assert abs(res.intensity[0] - 0.75) < 1e-9
        assert abs(res.depth[0] - 0.5) < 1e-9
        assert abs(res.opacity[0] - 1.0) < 1e-9

    def test_homogeneous_closed_form(self):
        n, sigma0, y0, span = 1024, 1.7, 0.8, 2.0
        s = (np.arange(n) + 0.5) * span / n
        rs = make_samples(s, 1e-6, span)
        res = composite(np.full((1, n), sigma0), np.full((1, n), y0), rs)
        expected = y0 * (1.0 - np.exp(-sigma0 * span))
        assert abs(res.intensity[0] - expected) / expected < 1e-3

    def test_weights_sum_equals_opacity(self):
        rng = np.random.default_rng(7)
        s = np.sort(rng.uniform(0.1, 5.0, (16, 64)), axis=-1)
        rs = make_samples(s, 0.05, 5.0)
        res = composite(rng.uniform(0, 3, (16, 64)), rng.uniform(0, 2, (16, 64)), rs)
        np.testing.assert_allclose(res.weights.sum(axis=-1), res.opacity, atol=1e-9)
        assert np.all(res.opacity <= 1.0 + 1e-6)

    def test_refinement_consistency(self):
        # doubling the sample count shrinks the change: convergence order >= 1
        def render(n):
            s = (np.arange(n) + 0.5) * 2.0 / n
            sigma = 0.8 + 0.5 * np.sin(3.0 * s)
            y = 1.0 + 0.3 * np.cos(2.0 * s)
            return composite(sigma[None], y[None], make_samples(s, 1e-6, 2.0)).intensity[0]

        d1 = abs(render(128) - render(64))
        d2 = abs(render(256) - render(128))
        assert d2 < d1

    def test_rejects_negative_sigma(self):
        rs = make_samples([0.2, 0.4], 0.1, 1.0)
        with pytest.raises(ValueError):
            composite(np.array([[-0.1, 0.5]]), np.ones((1, 2)), rs)


class TestCompositeBackward:
    def test_zero_cotangents(self):
        rs = make_samples([0.3, 0.6, 0.9], 0.1, 1.0)
        res = composite(np.ones((1, 3)), np.ones((1, 3)), rs)
        ds, dy = composite_backward(res, np.zeros(1), np.zeros(1))
        assert np.all(ds == 0) and np.all(dy == 0)

    def test_two_sample_hand_derivation(self):
        # I = a1 y1 + (1-a1) a2 y2 with a_i = 1 - exp(-sigma_i d_i)
        s1, s2, far = 1.0, 2.0, 3.0
        d1, d2 = s2 - s1, far - s2
        sig = np.array([[0.7, 1.3]])
        y = np.array([[0.9, 0.4]])
        rs = make_samples([s1, s2], 0.5, far)
        res = composite(sig, y, rs)
        ds, dy = composite_backward(res, np.ones(1), None)

        e1 = np.exp(-sig[0, 0] * d1)
        e2 = np.exp(-sig[0, 1] * d2)
        a1, a2 = 1 - e1, 1 - e2
        np.testing.assert_allclose(dy[0], [a1, e1 * a2], rtol=1e-12)
        d_sig1 = d1 * e1 * y[0, 0] - d1 * e1 * a2 * y[0, 1]
        d_sig2 = e1 * d2 * e2 * y[0, 1]
        np.testing.assert_allclose(ds[0], [d_sig1, d_sig2], rtol=1e-12)

    def test_finite_difference_parity(self):
        result = check_composite(n=32, seed=3)
        assert result.ok(), f"max rel err {result.max_rel_err}"

    def test_gradients_vanish_behind_opaque_sample(self):
        n = 16
        s = np.linspace(0.5, 3.5, n)
        sigma = np.full((1, n), 0.3)
        sigma[0, 4] = 1e4  # opaque wall
        y = np.ones((1, n))
        res = composite(sigma, y, make_samples(s, 0.1, 4.0))
        ds, dy = composite_backward(res, np.ones(1), np.ones(1))
        assert np.abs(ds[0, 6:]).max() <= 1e-12
        assert np.abs(dy[0, 6:]).max() <= 1e-12

    def test_stale_cache_rejected(self):
        res = composite(np.ones((1, 2)), np.ones((1, 2)), make_samples([0.3, 0.6], 0.1, 1.0))
        res._trans = None
        with pytest.raises(RuntimeError):
            composite_backward(res, np.ones(1))
