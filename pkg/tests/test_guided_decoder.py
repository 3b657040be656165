import numpy as np
import pytest
import torch

from rsic import bitstream as bs
from rsic import guided_decoder as gd
from rsic import hsvlc, pipeline
from rsic import weight_map as wm
from rsic.autoencoder import AutoencoderModel, AutoencoderNet, decode_latent, encode_image
from rsic.diffusion import EpsilonModel, EpsilonNet, make_schedule


def stub_epsilon(constant=None, width=8, t_train=1000, seed=0):
    """Real epsilon model whose output is forced to a constant (default 0)."""
    torch.manual_seed(seed)
    net = EpsilonNet(vocab_size=2, width=width, cond_dim=8, time_dim=16, blocks=1)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
        if constant is not None:
            net.head[-1].bias.fill_(constant)
    cfg = {"width": width, "cond_dim": 8, "time_dim": 16, "blocks": 1,
           "t_train": t_train, "schedule": "cosine"}
    return EpsilonModel(net.eval(), ["<null>", "<unk>"], cfg)


def small_codec(seed=3, hidden=16, bottleneck=8, hash_byte=2):
    torch.manual_seed(seed)
    net = hsvlc.HsvlcNet(hidden=hidden, bottleneck=bottleneck).eval()
    return hsvlc.CodecModel(net, {"num_scales": 4, "hidden": hidden,
                                  "bottleneck": bottleneck}, bytes([hash_byte] * 8))


def const_map(dims, level, levels=8):
    rows, cols = wm.grid_shape(dims)
    return wm.WeightMap(np.full((rows, cols), level, np.int64), levels, dims)


SCHEDULE = make_schedule(1000, "cosine")
CFG0 = gd.GuidanceConfig(steps=50, recurrence=1, gamma_base=0.0, seed=0)


class TestSamplingGrid:
    def test_structure(self):
        grid = gd.sampling_grid(SCHEDULE, 50)
        assert len(grid) == 51
        assert grid[0] == 0 and grid[-1] == 1000
        assert (np.diff(grid) > 0).all()

    def test_bad_steps(self):
        with pytest.raises(ValueError):
            gd.sampling_grid(SCHEDULE, 0)
        with pytest.raises(ValueError):
            gd.sampling_grid(SCHEDULE, 1001)


class TestGamma:
    def test_unit_ratio_gives_base(self):
        assert gd.gamma_value(1e3, 0.5, 0.5) == 1000.0

    def test_schedule_factor(self):
        assert gd.gamma_value(1e3, 0.81, 0.25) == pytest.approx(1000 * 1.8)


class TestDdimInvert:
    def test_zero_predictor_closed_form(self):
        z0 = np.random.default_rng(1).standard_normal((8, 8, 4))
        traj = gd.ddim_invert(lambda z, t: np.zeros_like(z), z0, None, None,
                              CFG0, SCHEDULE)
        grid = gd.sampling_grid(SCHEDULE, CFG0.steps)
        for k in (0, 13, 50):
            expected = np.sqrt(SCHEDULE.alpha_bar[grid[k]]) * z0
            assert np.allclose(traj[k], expected, atol=1e-12)

    def test_constant_predictor_matches_scalar_oracle(self):
        # Independent oracle: run the same affine recurrence on the scalar
        # pair (signal coefficient, accumulated noise coefficient).
        c = 0.73
        z0 = np.random.default_rng(2).standard_normal((8, 8, 4))
        traj = gd.ddim_invert(lambda z, t: np.full_like(z, c), z0, None, None,
                              CFG0, SCHEDULE)
        grid = gd.sampling_grid(SCHEDULE, CFG0.steps)
        scale, offset = 1.0, 0.0
        for k in range(CFG0.steps):
            ab_t = SCHEDULE.alpha_bar[grid[k]]
            ab_n = SCHEDULE.alpha_bar[grid[k + 1]]
            a = np.sqrt(ab_n / ab_t)
            b = np.sqrt(ab_n) * (np.sqrt(1 / ab_n - 1) - np.sqrt(1 / ab_t - 1))
            scale, offset = a * scale, a * offset + b * c
            assert np.allclose(traj[k + 1], scale * z0 + offset, rtol=1e-10, atol=1e-12)

    def test_deterministic(self):
        z0 = np.random.default_rng(3).standard_normal((8, 8, 4))
        eps = stub_epsilon(0.25)
        m = const_map((64, 64), 0, levels=1)
        omega = wm.omega_of(m.upsample_to((8, 8)))
        t1 = gd.ddim_invert(eps, z0, None, omega, CFG0, SCHEDULE)
        t2 = gd.ddim_invert(eps, z0, None, omega, CFG0, SCHEDULE)
        for a, b in zip(t1, t2):
            assert np.array_equal(a, b)


class TestInverseIdentity:
    @pytest.mark.parametrize("eps_fn", [
        lambda z, t: np.full_like(z, 0.41),
        lambda z, t: np.full_like(z, 2e-3 * t - 0.3),
    ], ids=["constant", "linear-in-t"])
    def test_denoise_inverts_inversion(self, eps_fn):
        z0 = np.random.default_rng(4).standard_normal((8, 8, 4))
        traj = gd.ddim_invert(eps_fn, z0, None, None, CFG0, SCHEDULE)
        z = traj[CFG0.steps]
        for k in range(CFG0.steps, 0, -1):
            z = gd.denoise_step(eps_fn, z, k, None, None, None, CFG0, SCHEDULE)
        assert np.linalg.norm(z - z0) / np.linalg.norm(z0) <= 1e-6

    def test_stepwise_inverse(self):
        eps_fn = lambda z, t: np.full_like(z, -0.2)
        z0 = np.random.default_rng(5).standard_normal((8, 8, 4))
        traj = gd.ddim_invert(eps_fn, z0, None, None, CFG0, SCHEDULE)
        for k in range(1, CFG0.steps + 1):
            back = gd.denoise_step(eps_fn, traj[k], k, None, None, None, CFG0, SCHEDULE)
            assert np.allclose(back, traj[k - 1], rtol=1e-9, atol=1e-12)

    def test_step_grid_violations(self):
        z = np.zeros((8, 8, 4))
        eps_fn = lambda z, t: np.zeros_like(z)
        with pytest.raises(ValueError):
            gd.denoise_step(eps_fn, z, 0, None, None, None, CFG0, SCHEDULE)
        with pytest.raises(ValueError):
            gd.denoise_step(eps_fn, z, 51, None, None, None, CFG0, SCHEDULE)


class TestGuidanceGradient:
    def test_zero_at_minimum(self):
        codec = small_codec()
        M = const_map((128, 128), 6)
        z = np.random.default_rng(6).standard_normal((16, 16, 4))
        target = hsvlc.apply_differentiable(codec, z.astype(np.float32), M)
        # Recompute the target through the same float64 path used inside.
        zt = torch.from_numpy(z.transpose(2, 0, 1))[None].float()
        m_lat = torch.from_numpy(M.upsample_to((16, 16)).astype(np.float32))[None, None]
        with torch.no_grad():
            target64 = hsvlc.reconstruct_diff(codec, zt, m_lat)[0].numpy().transpose(1, 2, 0)
        grad = gd.guidance_gradient(codec, z, target64.astype(np.float64), M)
        assert np.linalg.norm(grad) == 0.0

    def test_matches_finite_differences(self):
        codec = small_codec()
        codec.net.double()
        M = const_map((64, 64), 7)
        rng = np.random.default_rng(7)
        z = rng.standard_normal((8, 8, 4))
        target = rng.standard_normal((8, 8, 4))
        grad = gd.guidance_gradient(codec, z, target, M)

        def dist(zv):
            zt = torch.from_numpy(zv.transpose(2, 0, 1))[None].double()
            m_lat = torch.from_numpy(M.upsample_to((8, 8)))[None, None].double()
            with torch.no_grad():
                out = hsvlc.reconstruct_diff(codec, zt, m_lat)
            return float(torch.linalg.vector_norm(
                out - torch.from_numpy(target.transpose(2, 0, 1))[None]))

        h = 1e-4
        fd = np.zeros_like(grad)
        for idx in np.ndindex(*z.shape):
            zp, zm = z.copy(), z.copy()
            zp[idx] += h
            zm[idx] -= h
            fd[idx] = (dist(zp) - dist(zm)) / (2 * h)
        assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-3

    def test_norm_bounded_by_jacobian_operator_norm(self):
        # On a 2x2x4 latent the full Jacobian is small enough to build exactly.
        codec = small_codec()
        codec.net.double()
        M = const_map((16 * 8, 16 * 8), 7)  # 2x2 map grid for a 16x16 image? use exact dims
        M = const_map((128, 128), 7)
        # 2x2 latent comes from a 16x16 image; the map grid is 1x1 there.
        M = const_map((16, 16), 7)
        rng = np.random.default_rng(8)
        z = rng.standard_normal((2, 2, 4))
        target = rng.standard_normal((2, 2, 4))

        zt = torch.from_numpy(z.transpose(2, 0, 1))[None].double().requires_grad_(True)
        m_lat = torch.from_numpy(M.upsample_to((2, 2)))[None, None].double()
        out = hsvlc.reconstruct_diff(codec, zt, m_lat).reshape(-1)
        jac = torch.stack([torch.autograd.grad(out[i], zt, retain_graph=True)[0].reshape(-1)
                           for i in range(out.numel())])
        sigma_max = float(torch.linalg.matrix_norm(jac, ord=2))
        grad = gd.guidance_gradient(codec, z, target, M)
        assert np.linalg.norm(grad) <= sigma_max + 1e-9


class TestSelfRecur:
    def test_equal_levels_is_identity(self):
        z = np.random.default_rng(9).standard_normal((8, 8, 4))
        rng = np.random.default_rng(0)
        out = gd.self_recur(SCHEDULE, z, 500, 500, rng)
        assert np.allclose(out, z, atol=1e-15)

    def test_seeded_determinism(self):
        z = np.random.default_rng(10).standard_normal((8, 8, 4))
        a = gd.self_recur(SCHEDULE, z, 600, 580, np.random.default_rng(4))
        b = gd.self_recur(SCHEDULE, z, 600, 580, np.random.default_rng(4))
        assert np.array_equal(a, b)

    def test_order_violation_rejected(self):
        z = np.zeros((4, 4, 4))
        with pytest.raises(ValueError):
            gd.self_recur(SCHEDULE, z, 500, 600, np.random.default_rng(0))

    def test_variance_identity_monte_carlo(self):
        t, t_prev = 400, 380
        ratio = SCHEDULE.alpha_bar[t] / SCHEDULE.alpha_bar[t_prev]
        rng_z = np.random.default_rng(11)
        z = rng_z.standard_normal((8, 8, 4))
        v_in = z.var()
        rng = np.random.default_rng(12)
        draws = np.stack([gd.self_recur(SCHEDULE, z, t, t_prev, rng)
                          for _ in range(10_000)])
        predicted = ratio * v_in + (1.0 - ratio)
        assert draws.var() == pytest.approx(predicted, rel=0.03)


class TestDenoiseStepGuidance:
    def test_gamma_zero_is_pure_ddim(self):
        eps = stub_epsilon(0.3)
        m = const_map((64, 64), 0, levels=1)
        omega = wm.omega_of(m.upsample_to((8, 8)))
        z = np.random.default_rng(13).standard_normal((8, 8, 4))
        grid = gd.sampling_grid(SCHEDULE, 50)
        k = 20
        got = gd.denoise_step(eps, z, k, None, omega, None, CFG0, SCHEDULE)
        # Oracle: the DDIM affine update built from cfg_noise directly.
        from rsic.diffusion import cfg_noise
        ab_t = SCHEDULE.alpha_bar[grid[k]]
        ab_p = SCHEDULE.alpha_bar[grid[k - 1]]
        a = np.sqrt(ab_p / ab_t)
        b = np.sqrt(ab_p) * (np.sqrt(1 / ab_p - 1) - np.sqrt(1 / ab_t - 1))
        expected = a * z + b * cfg_noise(eps, z.astype(np.float32), int(grid[k]),
                                         None, omega)
        assert np.allclose(got, expected, atol=1e-12)

    def test_guidance_reduces_codec_distance(self):
        codec = small_codec()
        M = const_map((128, 128), 7)
        rng = np.random.default_rng(14)
        z = rng.standard_normal((16, 16, 4))
        target = rng.standard_normal((16, 16, 4))
        eps = stub_epsilon(0.0)
        cfg = gd.GuidanceConfig(steps=50, recurrence=1, gamma_base=50.0, seed=0)

        def codec_dist(zv):
            out = hsvlc.apply_differentiable(codec, zv.astype(np.float32), M)
            return float(np.linalg.norm(out - target))

        plain = gd.denoise_step(eps, z, 25, None, None, None, CFG0, SCHEDULE)
        guided = gd.denoise_step(eps, z, 25, None, None, target, cfg, SCHEDULE,
                                 codec=codec, M=M)
        assert codec_dist(guided) < codec_dist(plain)

    def test_guidance_requires_codec_and_map(self):
        eps = stub_epsilon(0.0)
        cfg = gd.GuidanceConfig(steps=50, recurrence=1, gamma_base=10.0, seed=0)
        z = np.zeros((8, 8, 4))
        with pytest.raises(ValueError):
            gd.denoise_step(eps, z, 5, None, None, np.ones((8, 8, 4)), cfg, SCHEDULE)


class TestDecode:
    def build_world(self):
        torch.manual_seed(0)
        ae_net = AutoencoderNet(width=4).eval()
        ae = AutoencoderModel(ae_net, {"width": 4, "latent_scale": 1.0}, b"\x07" * 8)
        codec = small_codec(hash_byte=8)
        eps = stub_epsilon(0.0)
        return gd.DecoderModels(ae, codec, eps)

    def container_for(self, models, img, caption="", levels=1, include_latents=True):
        dims = img.shape[:2]
        M = const_map(dims, 0, levels=levels)
        return pipeline.encode_container(img, caption, M, models.autoencoder,
                                         models.codec, include_latents=include_latents)

    def test_collapse_to_codec_reconstruction(self):
        models = self.build_world()
        img = np.random.default_rng(15).random((64, 64, 3)).astype(np.float32)
        container = self.container_for(models, img)
        out = gd.decode(container, models,
                        gd.GuidanceConfig(steps=1, recurrence=1, gamma_base=0.0, seed=0))
        z0 = encode_image(models.autoencoder, img)
        M = container.weight_map()
        zhat = hsvlc.decompress(models.codec, hsvlc.compress(models.codec, z0, M), M)
        assert np.array_equal(out, decode_latent(models.autoencoder, zhat))

    def test_byte_identical_across_runs(self):
        models = self.build_world()
        img = np.random.default_rng(16).random((64, 64, 3)).astype(np.float32)
        container = self.container_for(models, img)
        cfg = gd.GuidanceConfig(steps=4, recurrence=3, gamma_base=25.0, seed=11)
        assert np.array_equal(gd.decode(container, models, cfg),
                              gd.decode(container, models, cfg))

    def test_hash_mismatch_rejected(self):
        models = self.build_world()
        img = np.zeros((64, 64, 3), np.float32)
        container = self.container_for(models, img)
        bad = bs.RsicContainer(container.image_dims, container.levels, b"\xee" * 8,
                               container.description, container.map_bytes,
                               container.latent_streams)
        with pytest.raises(gd.DecodeError):
            gd.decode(bad, models, CFG0)

    def test_empty_streams_decode_generatively(self):
        models = self.build_world()
        img = np.random.default_rng(17).random((64, 64, 3)).astype(np.float32)
        container = self.container_for(models, img, caption="hi", include_latents=False)
        cfg = gd.GuidanceConfig(steps=3, recurrence=2, gamma_base=1e3, seed=5)
        out = gd.decode(container, models, cfg)
        assert out.shape == (64, 64, 3)
        assert np.isfinite(out).all()
        out2 = gd.decode(container, models, cfg)
        assert np.array_equal(out, out2)
