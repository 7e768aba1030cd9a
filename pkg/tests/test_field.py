import os

import numpy as np
import pytest

from evfield.errors import DataError
from evfield.field import (EncodingConfig, FieldConfig, encode, field_backward,
                           field_forward, field_param_shapes, init_field,
                           load_checkpoint, save_checkpoint, softplus)
from evfield.gradcheck import check_field


def encode_batch(rng, cfg, n):
    x = rng.uniform(-1, 1, (n, 3))
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return (encode(x, cfg.encoding, "position"),
            encode(d, cfg.encoding, "direction"))


class TestEncode:
    def test_zero_input(self):
        cfg = EncodingConfig()
        out = encode(np.zeros((1, 3)), cfg, "position")[0]
        np.testing.assert_allclose(out[:3], 0.0)
        sin_cos = out[3:].reshape(10, 2, 3)
        np.testing.assert_allclose(sin_cos[:, 0], 0.0)
        np.testing.assert_allclose(sin_cos[:, 1], 1.0)

    def test_default_dimensions(self):
        cfg = EncodingConfig()
        assert cfg.dim("position") == 63
        assert cfg.dim("direction") == 27
        assert encode(np.zeros((4, 3)), cfg, "position").shape == (4, 63)
        assert encode(np.zeros((4, 3)), cfg, "direction").shape == (4, 27)

    def test_matches_scalar_loop(self):
        # independent re-evaluation of the formula, one scalar at a time
        cfg = EncodingConfig(l_x=6)
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, (5, 3))
        got = encode(x, cfg, "position", dtype=np.float64)
        for i in range(5):
            expected = list(x[i])
            for level in range(6):
                expected.extend(np.sin(2.0 ** level * np.pi * x[i]))
                expected.extend(np.cos(2.0 ** level * np.pi * x[i]))
            np.testing.assert_allclose(got[i], expected, atol=1e-12)

    def test_no_raw_variant(self):
        cfg = EncodingConfig(l_x=4, l_d=2, include_raw=False)
        assert encode(np.zeros((2, 3)), cfg, "position").shape == (2, 24)

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError):
            EncodingConfig(l_x=0)


class TestForward:
    def test_zero_params_eval(self):
        cfg = FieldConfig(depth=2, width=16)
        params = init_field(cfg, seed=0, dtype=np.float64)
        for name in params.names():
            params.arrays[name][:] = 0.0
        x_enc, d_enc = encode_batch(np.random.default_rng(1), cfg, 4)
        sigma, y, _ = field_forward(params, x_enc, d_enc)
        np.testing.assert_allclose(sigma, np.log(2.0), atol=1e-12)
        np.testing.assert_allclose(y, np.log(2.0), atol=1e-12)

    def test_density_noise_train_only(self):
        cfg = FieldConfig(depth=2, width=16)
        params = init_field(cfg, seed=0, dtype=np.float64)
        for name in params.names():
            params.arrays[name][:] = 0.0
        x_enc, d_enc = encode_batch(np.random.default_rng(2), cfg, 20_000)
        rng = np.random.default_rng(3)
        sigma, _, _ = field_forward(params, x_enc, d_enc, train_mode=True, rng=rng)
        # sigma = softplus(eta): recover eta and check its moments
        eta = np.log(np.expm1(sigma))
        assert abs(eta.mean()) < 0.02
        assert abs(eta.var() - 1.0) < 0.03
        with pytest.raises(ValueError):
            field_forward(params, x_enc, d_enc, train_mode=True)

    def test_eval_deterministic(self):
        cfg = FieldConfig(depth=3, width=24)
        params = init_field(cfg, seed=5)
        x_enc, d_enc = encode_batch(np.random.default_rng(6), cfg, 64)
        s1, y1, _ = field_forward(params, x_enc, d_enc)
        s2, y2, _ = field_forward(params, x_enc, d_enc)
        assert np.array_equal(s1, s2) and np.array_equal(y1, y2)

    def test_matches_plain_reimplementation(self):
        # straight-line oracle with explicit skip handling
        cfg = FieldConfig(depth=4, width=32)
        params = init_field(cfg, seed=7, dtype=np.float64)
        a = params.arrays
        rng = np.random.default_rng(8)
        x_enc, d_enc = encode_batch(rng, cfg, 6)
        x64, d64 = x_enc.astype(np.float64), d_enc.astype(np.float64)

        h = x64
        for i in range(4):
            if i in cfg.skip_layers:
                h = np.concatenate([h, x64], axis=-1)
            h = np.maximum(h @ a[f"trunk.{i}.w"] + a[f"trunk.{i}.b"], 0)
        raw_sigma = (h @ a["sigma.w"] + a["sigma.b"])[:, 0]
        feat = h @ a["feat.w"] + a["feat.b"]
        vh = np.maximum(np.concatenate([feat, d64], -1) @ a["view.w"] + a["view.b"], 0)
        raw_y = (vh @ a["out.w"] + a["out.b"])[:, 0]

        sigma, y, _ = field_forward(params, x_enc, d_enc)
        np.testing.assert_allclose(sigma, softplus(raw_sigma), rtol=1e-12)
        np.testing.assert_allclose(y, softplus(raw_y), rtol=1e-12)

    def test_initial_outputs_near_configured_values(self):
        cfg = FieldConfig(depth=4, width=64, sigma_init=0.1, y_init=0.5)
        params = init_field(cfg, seed=9)
        x_enc, d_enc = encode_batch(np.random.default_rng(10), cfg, 256)
        sigma, y, _ = field_forward(params, x_enc, d_enc)
        assert abs(np.median(sigma) - 0.1) < 0.05
        assert abs(np.median(y) - 0.5) < 0.1

    def test_shape_mismatch_rejected(self):
        cfg = FieldConfig(depth=2, width=16)
        params = init_field(cfg, seed=0)
        with pytest.raises(ValueError):
            field_forward(params, np.zeros((4, 10)), np.zeros((4, 27)))

    def test_softplus_overflow_safe(self):
        z = np.array([-1e4, -700.0, -50.0, 0.0, 50.0, 1e4])
        out = softplus(z)
        assert np.all(np.isfinite(out))
        assert np.all(out >= 0)
        # strictly positive wherever exp(-|z|) is representable at all
        assert np.all(out[z > -700] > 0)
        np.testing.assert_allclose(out[-1], 1e4)


class TestBackward:
    def test_zero_cotangents(self):
        cfg = FieldConfig(depth=2, width=16)
        params = init_field(cfg, seed=0, dtype=np.float64)
        x_enc, d_enc = encode_batch(np.random.default_rng(1), cfg, 8)
        _, _, cache = field_forward(params, x_enc, d_enc)
        grads = params.zero_grads()
        field_backward(params, cache, np.zeros(8), np.zeros(8), grads)
        assert all(np.all(g == 0) for g in grads.values())

    def test_single_affine_layer_closed_form(self):
        # depth-1, tiny widths: gradient of softplus(w.x + b) by hand
        cfg = FieldConfig(depth=1, width=4, view_width=3,
                          encoding=EncodingConfig(l_x=1, l_d=1))
        params = init_field(cfg, seed=2, dtype=np.float64)
        rng = np.random.default_rng(3)
        x_enc, d_enc = encode_batch(rng, cfg, 1)
        sigma, y, cache = field_forward(params, x_enc, d_enc)
        grads = params.zero_grads()
        field_backward(params, cache, np.ones(1), np.zeros(1), grads)
        # d sigma / d sigma.w = sigmoid(raw) * h_last
        h = np.maximum(x_enc.astype(np.float64) @ params.arrays["trunk.0.w"]
                       + params.arrays["trunk.0.b"], 0)
        raw = (h @ params.arrays["sigma.w"] + params.arrays["sigma.b"])[0, 0]
        expected = (1 / (1 + np.exp(-raw))) * h[0]
        np.testing.assert_allclose(grads["sigma.w"][:, 0], expected, rtol=1e-12)

    def test_stale_cache_rejected(self):
        cfg = FieldConfig(depth=2, width=16)
        params = init_field(cfg, seed=0)
        other = init_field(cfg, seed=1)
        x_enc, d_enc = encode_batch(np.random.default_rng(4), cfg, 4)
        _, _, cache = field_forward(params, x_enc, d_enc)
        with pytest.raises(RuntimeError):
            field_backward(other, cache, np.zeros(4), np.zeros(4), other.zero_grads())

    def test_accumulation_is_additive(self):
        cfg = FieldConfig(depth=2, width=16)
        params = init_field(cfg, seed=0, dtype=np.float64)
        x_enc, d_enc = encode_batch(np.random.default_rng(5), cfg, 8)
        cs = np.ones(8)
        _, _, cache = field_forward(params, x_enc, d_enc)
        g1 = params.zero_grads()
        field_backward(params, cache, cs, cs, g1)
        _, _, cache = field_forward(params, x_enc, d_enc)
        field_backward(params, cache, cs, cs, g1)
        _, _, cache = field_forward(params, x_enc, d_enc)
        g2 = params.zero_grads()
        field_backward(params, cache, 2 * cs, 2 * cs, g2)
        for name in params.names():
            np.testing.assert_allclose(g1[name], g2[name], rtol=1e-9, atol=1e-12)

    def test_finite_difference_parity_small_net(self):
        result = check_field(seed=1)
        assert result.ok(), f"max rel err {result.max_rel_err}"

    def test_finite_difference_parity_default_net_spot(self):
        result = check_field(config=FieldConfig(), seed=1, probes_per_array=4)
        assert result.ok(), f"max rel err {result.max_rel_err}"


class TestCheckpoint:
    def _roundtrip(self, tmp_path, dtype):
        cfg = FieldConfig(depth=3, width=24, encoding=EncodingConfig(l_x=6, l_d=2))
        params = init_field(cfg, seed=11, dtype=dtype)
        thr = np.log(np.full((7, 2), 0.4, dtype=np.float32))
        path = os.path.join(tmp_path, "ckpt.evnf")
        save_checkpoint(path, params, thr)
        loaded, thr2 = load_checkpoint(path)
        assert loaded.config == cfg
        for name in params.names():
            np.testing.assert_array_equal(loaded.arrays[name],
                                          params.arrays[name].astype(np.float32))
        np.testing.assert_array_equal(thr2, thr)

    def test_round_trip_f32(self, tmp_path):
        self._roundtrip(str(tmp_path), np.float32)

    def test_corruption_detected(self, tmp_path):
        cfg = FieldConfig(depth=2, width=8)
        params = init_field(cfg, seed=0)
        path = str(tmp_path / "c.evnf")
        save_checkpoint(path, params, np.zeros((2, 2)))
        blob = bytearray(open(path, "rb").read())
        blob[40] ^= 0xFF
        open(path, "wb").write(bytes(blob))
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_bad_magic_detected(self, tmp_path):
        path = str(tmp_path / "x.evnf")
        open(path, "wb").write(b"NOPE" + b"\0" * 64)
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_param_count_default_architecture(self):
        shapes = dict(field_param_shapes(FieldConfig()))
        assert shapes["trunk.0.w"] == (63, 256)
        assert shapes["trunk.4.w"] == (256 + 63, 256)  # skip concat at layer 5
        assert shapes["view.w"] == (256 + 27, 128)
