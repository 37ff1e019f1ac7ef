"""Codec tests: sampling algebra, quantizer, pseudo-inverse, reconstruction."""

import numpy as np
import pytest

from aerotx import cs, nn
from aerotx.errors import ConfigError, NumericalError, PartitionError
from aerotx.imaging import generate_synthetic


def per_block_compress_oracle(img, phi, k):
    """Loop form of the sampling equation: y_i = phi x_i per sub-block."""
    h, w, c = img.shape
    out = np.zeros((h // k, w // k, phi.shape[0]))
    for gi in range(h // k):
        for gj in range(w // k):
            x = img[gi * k:(gi + 1) * k, gj * k:(gj + 1) * k, :].reshape(-1)
            out[gi, gj] = phi.astype(np.float64) @ x.astype(np.float64)
    return out


class TestConfig:
    def test_measurement_count_ceiling(self):
        assert cs.measurement_count(8, 0.3) == 58  # ceil(192 * 0.3) = ceil(57.6)
        assert cs.CsConfig(k=8, sr=0.3).m == 58

    def test_full_rate_allowed(self):
        assert cs.CsConfig(k=4, sr=1.0).m == 48

    def test_alignment_check(self):
        cfg = cs.CsConfig(k=16)
        with pytest.raises(ConfigError) as exc:
            cfg.check_image(224, 224)
        assert "H/4=56" in str(exc.value)
        cs.CsConfig(k=8).check_image(224, 224)  # 8 | 56

    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            cs.CsConfig(sr=1.5)
        with pytest.raises(ConfigError):
            cs.CsConfig(stages=0)


class TestCompress:
    def test_matches_loop_oracle_all_ones_mask(self):
        rng = np.random.default_rng(0)
        kernel = cs.SamplingKernel.random(4, 0.3, rng)
        img = rng.random((16, 16, 3)).astype(np.float32)
        meas = cs.compress(img, kernel, mask=np.ones(16, dtype=np.uint8))
        oracle = per_block_compress_oracle(img, kernel.phi, 4)
        assert np.max(np.abs(meas.data - oracle)) <= 1e-6

    def test_oracle_equivalence_many_blocks(self):
        # >= 100 random sub-blocks across several images
        rng = np.random.default_rng(1)
        kernel = cs.SamplingKernel.random(4, 0.4, rng)
        total = 0
        for _ in range(8):
            img = rng.random((16, 16, 3)).astype(np.float32)
            meas = cs.compress(img, kernel)
            oracle = per_block_compress_oracle(img, kernel.phi, 4)
            assert np.max(np.abs(meas.data - oracle)) <= 1e-6
            total += meas.data.shape[0] * meas.data.shape[1]
        assert total >= 100

    def test_all_zero_mask(self):
        rng = np.random.default_rng(2)
        kernel = cs.SamplingKernel.random(4, 0.3, rng)
        img = rng.random((16, 16, 3)).astype(np.float32)
        meas = cs.compress(img, kernel, mask=np.zeros(16, dtype=np.uint8))
        assert np.array_equal(meas.data, np.zeros_like(meas.data))

    def test_mask_zeroes_exactly_the_unselected(self):
        rng = np.random.default_rng(3)
        kernel = cs.SamplingKernel.random(4, 0.3, rng)
        img = rng.random((32, 32, 3)).astype(np.float32) + 0.1
        mask = np.zeros(16, dtype=np.uint8)
        mask[5] = 1
        meas = cs.compress(img, kernel, mask=mask)
        grid = cs.mask_grid(mask, 8, 8) > 0
        assert np.all(meas.data[~grid] == 0.0)
        assert np.all(np.any(meas.data[grid] != 0.0, axis=-1))

    def test_misaligned_image(self):
        rng = np.random.default_rng(4)
        kernel = cs.SamplingKernel.random(4, 0.3, rng)
        with pytest.raises(PartitionError):
            cs.compress(np.zeros((18, 16, 3), dtype=np.float32), kernel)


class TestPseudoInverse:
    def test_orthonormal_rows_give_transpose(self):
        q, _ = np.linalg.qr(np.random.default_rng(5).normal(size=(27, 6)))
        phi = np.ascontiguousarray(q.T.astype(np.float32))  # (6, 27), orthonormal rows
        pinv = cs.pseudo_inverse_matrix(phi)
        assert np.max(np.abs(pinv - phi.T)) <= 1e-5

    def test_random_full_rank(self):
        rng = np.random.default_rng(6)
        phi = rng.normal(size=(6, 27)).astype(np.float32)
        pinv = cs.pseudo_inverse_matrix(phi)
        err = np.max(np.abs(phi.astype(np.float64) @ pinv - np.eye(6)))
        assert err <= 1e-6

    def test_duplicated_row_raises(self):
        rng = np.random.default_rng(7)
        phi = rng.normal(size=(6, 27)).astype(np.float32)
        phi[3] = phi[2]
        with pytest.raises(NumericalError) as exc:
            cs.pseudo_inverse_matrix(phi)
        assert "condition number" in str(exc.value)

    def test_kernel_pinv_identity_property(self):
        rng = np.random.default_rng(8)
        kernel = cs.SamplingKernel.random(8, 0.3, rng)
        prod = kernel.phi.astype(np.float64) @ kernel.phi_pinv.astype(np.float64)
        assert np.max(np.abs(prod - np.eye(kernel.m))) <= 1e-5


class TestQuantizer:
    def test_zero_maps_to_midcode_and_back(self):
        ranges = cs.QuantRanges.fixed(1.0, 4)
        codes, _ = cs.quantize(np.zeros((2, 4), dtype=np.float32), 8, ranges)
        assert np.all(codes == 128)
        back = cs.dequantize(codes, 8, ranges)
        assert np.all(back == 0.0)
        assert np.max(np.abs(back)) <= 2.0 / 256 / 2 + 1e-9

    def test_round_trip_half_step_bound(self):
        rng = np.random.default_rng(9)
        ranges = cs.QuantRanges.fixed(1.0, 8)
        vals = rng.uniform(-1, 1, size=(500, 8)).astype(np.float32)
        back = cs.quantize_roundtrip(vals, 8, ranges)
        # midtread step = width / (2^gamma - 2); max in-range error is half of it
        step = 2.0 / (2 ** 8 - 2)
        assert np.max(np.abs(back - vals)) <= step / 2 + 1e-9

    def test_clamping_counted(self):
        ranges = cs.QuantRanges.fixed(1.0, 2)
        vals = np.array([[0.5, 3.0]], dtype=np.float32)
        codes, clipped = cs.quantize(vals, 8, ranges)
        assert clipped == 1
        back = cs.dequantize(codes, 8, ranges)
        assert back[0, 1] == pytest.approx(1.0, abs=1e-6)

    def test_masked_zeros_survive_round_trip(self):
        rng = np.random.default_rng(10)
        kernel = cs.SamplingKernel.random(4, 0.3, rng)
        img = rng.random((16, 16, 3)).astype(np.float32)
        mask = np.array([1, 0] * 8, dtype=np.uint8)
        meas = cs.compress(img, kernel, mask=mask)
        ranges = cs.QuantRanges.calibrate(cs.compress(img, kernel).data)
        back = cs.quantize_roundtrip(meas.data, 8, ranges)
        grid = cs.mask_grid(mask, 4, 4) > 0
        assert np.all(back[~grid] == 0.0)

    def test_payload_byte_count(self):
        codes = np.zeros(100, dtype=np.uint16)
        assert len(cs.pack_codes(codes, 8)) == 100
        assert len(cs.pack_codes(codes, 4)) == 50

    def test_pack_unpack_round_trip(self):
        rng = np.random.default_rng(11)
        for gamma in (1, 3, 8, 11, 16):
            codes = rng.integers(0, 2 ** gamma, size=257).astype(np.uint16)
            back = cs.unpack_codes(cs.pack_codes(codes, gamma), gamma, 257)
            assert np.array_equal(back, codes)


class TestPayloadFormat:
    def test_encode_decode_round_trip(self):
        rng = np.random.default_rng(12)
        kernel = cs.SamplingKernel.random(4, 0.3, rng)
        img = rng.random((16, 16, 3)).astype(np.float32)
        ranges = cs.QuantRanges.calibrate(cs.compress(img, kernel).data)
        mask = np.array([1, 0, 0, 1] * 4, dtype=np.uint8)
        meas = cs.compress(img, kernel, mask=mask)
        payload = cs.encode_payload(meas, 8, ranges, gain_index=5)
        back, gain_index = cs.decode_payload(payload, 8, ranges, meas.grid_shape)
        assert gain_index == 5
        assert np.array_equal(back.mask, mask)
        expected = cs.quantize_roundtrip(meas.data, 8, ranges) * cs.mask_grid(mask, 4, 4)[:, :, None]
        assert np.allclose(back.data, expected, atol=1e-7)

    def test_header_and_size(self):
        rng = np.random.default_rng(13)
        kernel = cs.SamplingKernel.random(4, 0.5, rng)  # m = 24
        img = rng.random((16, 16, 3)).astype(np.float32)
        ranges = cs.QuantRanges.fixed(2.0, kernel.m)
        mask = np.zeros(16, dtype=np.uint8)
        mask[0] = 1
        meas = cs.compress(img, kernel, mask=mask)
        payload = cs.encode_payload(meas, 8, ranges, gain_index=2)
        assert len(payload) == 3 + kernel.m  # 1 sub-block per semantic block here
        assert int.from_bytes(payload[:2], "little") == 1
        assert payload[2] == 2


class TestInitialRecon:
    def test_projection_property(self):
        # for tiles in the row space, pinv round trip reproduces them
        rng = np.random.default_rng(14)
        kernel = cs.SamplingKernel.random(4, 0.5, rng)
        coeffs = rng.normal(size=(16, kernel.m)).astype(np.float32)
        tiles = (coeffs @ kernel.phi).reshape(4, 4, 4, 4, 3).transpose(0, 2, 1, 3, 4)
        img = np.ascontiguousarray(tiles.reshape(16, 16, 3))
        meas = cs.compress(img, kernel)
        x0 = cs.initial_recon(meas, kernel)
        assert np.max(np.abs(x0 - img)) <= 1e-5

    def test_zero_measurements(self):
        rng = np.random.default_rng(15)
        kernel = cs.SamplingKernel.random(4, 0.3, rng)
        meas = cs.Measurements(np.zeros((4, 4, kernel.m), dtype=np.float32))
        assert np.array_equal(cs.initial_recon(meas, kernel), np.zeros((16, 16, 3), dtype=np.float32))

    def test_identity_kernel_full_rate_lossless(self):
        kernel = cs.SamplingKernel.identity(4)
        rng = np.random.default_rng(16)
        img = rng.random((16, 16, 3)).astype(np.float32)
        meas = cs.compress(img, kernel)
        assert np.max(np.abs(cs.initial_recon(meas, kernel) - img)) <= 1e-6

    def test_full_rate_round_trip_within_quantizer_half_step(self):
        kernel = cs.SamplingKernel.identity(4)
        rng = np.random.default_rng(17)
        img = rng.random((16, 16, 3)).astype(np.float32)
        meas = cs.compress(img, kernel)
        ranges = cs.QuantRanges.fixed(1.0, kernel.m)
        deq = cs.quantize_roundtrip(meas.data, 8, ranges)
        x0 = cs.initial_recon(cs.Measurements(deq), kernel)
        step = 2.0 / (2 ** 8 - 2)
        assert np.max(np.abs(x0 - img)) <= step / 2 + 1e-9


def identity_denoiser_params(channels=6):
    """Stage nets computing f_res = 0 and f_den = identity via +/- parts."""
    shapes = cs._conv_param_shapes(channels)
    arrays = {}
    arrays["res/w0"] = np.zeros(shapes["res/w0"], dtype=np.float32)
    arrays["res/w1"] = np.zeros(shapes["res/w1"], dtype=np.float32)
    w0 = np.zeros(shapes["den/w0"], dtype=np.float32)
    for c in range(3):
        w0[1, 1, c, c] = 1.0       # x
        w0[1, 1, c, c + 3] = -1.0  # -x
    w1 = np.zeros(shapes["den/w1"], dtype=np.float32)
    for c in range(6):
        w1[1, 1, c, c] = 1.0
    w2 = np.zeros(shapes["den/w2"], dtype=np.float32)
    for c in range(3):
        w2[1, 1, c, c] = 1.0
        w2[1, 1, c + 3, c] = -1.0  # relu(x) - relu(-x) = x
    arrays["den/w0"] = w0
    arrays["den/w1"] = w1
    arrays["den/w2"] = w2
    return arrays


class TestReconstruct:
    def _model(self, kernel, stages=3, channels=6, identity=False, seed=0):
        cfg = cs.CsConfig(k=kernel.k, sr=0.3, stages=stages, channels=channels)
        model = cs.ReconModel(cfg, kernel, seed=seed)
        if identity:
            base = identity_denoiser_params(channels)
            for l in range(stages):
                for name, arr in base.items():
                    model.params[f"stage{l}/{name}"].data = arr.copy()
        return model

    def test_zero_stages_returns_initial(self):
        rng = np.random.default_rng(18)
        kernel = cs.SamplingKernel.random(4, 0.3, rng)
        img = rng.random((16, 16, 3)).astype(np.float32)
        meas = cs.compress(img, kernel)
        model = self._model(kernel)
        res = cs.reconstruct(meas, model, stages=0)
        assert np.array_equal(res.x_hat, cs.initial_recon(meas, kernel))

    def test_identity_config_residual_non_increasing(self):
        # with f_res = 0 and f_den = identity the measurement residual hits
        # zero after one projection step and stays there
        rng = np.random.default_rng(19)
        kernel = cs.SamplingKernel.random(4, 0.5, rng)
        img = rng.random((16, 16, 3)).astype(np.float32)
        meas = cs.compress(img, kernel)
        model = self._model(kernel, stages=3, identity=True)
        res = cs.reconstruct(meas, model)
        norms = res.residual_norms
        assert all(b <= a + 1e-5 for a, b in zip(norms, norms[1:]))
        assert norms[1] <= 1e-3
        assert norms[2] <= 1e-3

    def test_deterministic(self):
        rng = np.random.default_rng(20)
        kernel = cs.SamplingKernel.random(4, 0.3, rng)
        img = rng.random((16, 16, 3)).astype(np.float32)
        meas = cs.compress(img, kernel)
        model = self._model(kernel, seed=3)
        a = cs.reconstruct(meas, model).x_hat
        b = cs.reconstruct(meas, model).x_hat
        assert a.tobytes() == b.tobytes()


@pytest.fixture(scope="module")
def tiny_images():
    return generate_synthetic(33, 12, 2, 32, 32).images


class TestTraining:
    def test_pretrain_reduces_loss_and_is_deterministic(self, tiny_images):
        cfg = cs.CsConfig(k=4, sr=0.3, stages=1)
        k1, kp1, log1 = cs.pretrain_kernel(tiny_images, cfg, steps=120, batch=8, seed=5)
        k2, _, _ = cs.pretrain_kernel(tiny_images, cfg, steps=120, batch=8, seed=5)
        assert k1.kernel.tobytes() == k2.kernel.tobytes()
        assert np.mean(log1.losses[-10:]) < np.mean(log1.losses[:10])

    def test_pretrained_beats_random_kernel_initial_recon(self, tiny_images):
        # trained (kappa, kappa') one-shot recon vs a random Gaussian kernel
        # reconstructed through its analytic pseudo-inverse
        cfg = cs.CsConfig(k=4, sr=0.3, stages=1)
        kernel, kprime, _ = cs.pretrain_kernel(tiny_images, cfg, steps=250, batch=8, seed=5)
        rand_kernel = cs.SamplingKernel.random(4, 0.3, np.random.default_rng(99))
        test = tiny_images[:8]

        def x0_mse(kern, init_kernel=None):
            errs = []
            for img in test:
                x0 = cs.initial_recon(cs.compress(img, kern), kern, init_kernel)
                errs.append(cs.mean_pixel_mse(x0, img))
            return float(np.mean(errs))

        assert x0_mse(kernel, kprime) < x0_mse(rand_kernel)

    def test_full_rate_identity_attains_zero_loss(self):
        # at sr = 1 an invertible configuration exists with exactly zero MSE
        rng = np.random.default_rng(21)
        images = rng.random((4, 16, 16, 3)).astype(np.float32)
        cfg = cs.CsConfig(k=4, sr=1.0, stages=1)
        kernel, kprime, log = cs.pretrain_kernel(images, cfg, steps=1, batch=4,
                                                 seed=0, init="identity")
        assert log.losses[0] <= 1e-12

    def test_train_stages_improves_over_initial(self, tiny_images):
        cfg = cs.CsConfig(k=4, sr=0.3, stages=2, channels=8)
        kernel, _, _ = cs.pretrain_kernel(tiny_images, cfg, steps=200, batch=8, seed=7)
        train, held = tiny_images[:16], tiny_images[16:]
        model, log = cs.train_stages(train, kernel, cfg, steps=250, batch=8, seed=7)
        mse_l, mse_0 = [], []
        for img in held:
            meas = cs.compress(img, kernel)
            mse_l.append(cs.mean_pixel_mse(cs.reconstruct(meas, model).x_hat, img))
            mse_0.append(cs.mean_pixel_mse(cs.initial_recon(meas, kernel), img))
        assert np.mean(mse_l) < np.mean(mse_0)

    def test_zero_steps_keeps_params(self, tiny_images):
        cfg = cs.CsConfig(k=4, sr=0.3, stages=1, channels=4)
        kernel = cs.SamplingKernel.random(4, 0.3, np.random.default_rng(1))
        fresh = cs.ReconModel(cfg, kernel, seed=11)
        before = {n: t.data.copy() for n, t in fresh.params.items()}
        model, log = cs.train_stages(tiny_images[:4], kernel, cfg, steps=0, model=fresh)
        for n, t in model.params.items():
            assert np.array_equal(t.data, before[n])
        assert log.losses == []

    def test_stage_gradients_pass_grad_check(self):
        rng = np.random.default_rng(22)
        kernel = cs.SamplingKernel.random(4, 0.5, rng)
        cfg = cs.CsConfig(k=4, sr=0.5, stages=2, channels=4)
        model = cs.ReconModel(cfg, kernel, seed=2)
        img = rng.random((1, 8, 8, 3)).astype(np.float32)
        y = cs.compress_batch(img, kernel)

        def f():
            x_hat, _ = model.forward_tensor(nn.constant(y))
            return nn.mse_loss(x_hat, nn.constant(img))

        err = nn.grad_check(f, model.params, rng=np.random.default_rng(0),
                            max_checks_per_param=10)
        assert err <= 1e-3
