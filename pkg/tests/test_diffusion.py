import numpy as np
import pytest
import torch

from sonogen import dataset as ds
from sonogen import diffusion as df
from sonogen import lora
from sonogen.errors import BadTimestep, EmptyDataset, NonFiniteLoss, UntrainedModel


def phantom_tris(n, seed=0, size=64, trimester=ds.Trimester.second):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        pair = ds.generate_phantom(ds.random_phantom_spec(rng, trimester,
                                                          height=size, width=size))
        out.append((ds.compose_tri_channel(pair.image, pair.mask), trimester))
    return out


def tiny_net(size=64, trained=False):
    net = df.DenoiserNet(df.DenoiserConfig(image_size=size, base_channels=16))
    net.trained = trained
    return net


class TestSchedule:
    def test_alpha_cum_matches_bruteforce_product(self):
        sched = df.NoiseSchedule.linear(T=400)
        prod = 1.0
        for t in range(1, 401):
            prod *= 1.0 - sched.betas[t - 1]
            assert abs(sched.alpha_cum_at(t) - prod) <= 1e-12

    def test_linear_1000_first_alpha(self):
        sched = df.NoiseSchedule.linear(T=1000, beta_start=1e-4, beta_end=0.02)
        assert abs(sched.alpha_cum_at(1) - 0.9999) < 1e-12

    def test_monotone_and_bounded(self):
        sched = df.NoiseSchedule.linear(T=400)
        assert np.all(np.diff(sched.betas) >= 0)
        assert 0 < sched.alpha_cum_at(400) < sched.alpha_cum_at(1) <= 1

    def test_bad_timestep(self):
        sched = df.NoiseSchedule.linear(T=100)
        with pytest.raises(BadTimestep):
            sched.alpha_cum_at(101)
        with pytest.raises(BadTimestep):
            sched.alpha_cum_at(-1)


class TestForwardDiffuse:
    def test_t_zero_identity(self):
        sched = df.NoiseSchedule.linear(T=50)
        x0 = torch.randn(3, 16, 16, generator=torch.Generator().manual_seed(0))
        eps = torch.randn(3, 16, 16, generator=torch.Generator().manual_seed(1))
        assert torch.equal(df.forward_diffuse(x0, 0, eps, sched), x0)

    def test_t_max_close_to_noise(self):
        sched = df.NoiseSchedule.linear(T=1000)
        gen = torch.Generator().manual_seed(2)
        x0 = torch.rand(3, 8, 8, generator=gen) * 2 - 1
        eps = torch.randn(3, 8, 8, generator=gen)
        x_t = df.forward_diffuse(x0, 1000, eps, sched)
        bound = np.sqrt(sched.alpha_cum_at(1000)) * x0.abs().max().item()
        resid = (x_t - np.sqrt(1 - sched.alpha_cum_at(1000)) * eps).abs().max().item()
        assert resid <= bound + 1e-6

    def test_mean_preservation_over_draws(self):
        sched = df.NoiseSchedule.linear(T=400)
        gen = torch.Generator().manual_seed(3)
        x0 = torch.rand(16, generator=gen) + 0.5  # keep entries away from 0
        x0 = x0.expand(10000, 16)
        eps = torch.randn(10000, 16, generator=gen)
        t = 200
        x_t = df.forward_diffuse(x0, t, eps, sched)
        expected = np.sqrt(sched.alpha_cum_at(t)) * x0[0]
        rel = ((x_t.mean(0) - expected).norm() / expected.norm()).item()
        assert rel <= 0.05


class TestTrainer:
    def test_overfit_single_batch(self):
        data = phantom_tris(4, seed=1)
        cfg = df.DiffusionTrainConfig(mode="from_scratch", epochs=200, batch_size=4,
                                      learning_rate=3e-4, seed=0)
        out = df.train_denoiser(data, cfg, model=tiny_net())
        initial = float(np.mean(out.losses[:10]))
        final = float(np.mean(out.losses[-10:]))
        assert final < 0.5 * initial

    def test_lora_mode_freezes_base(self):
        data = phantom_tris(4, seed=2)
        net = tiny_net()
        cfg = df.DiffusionTrainConfig(mode="lora_finetune", epochs=3, batch_size=4,
                                      lora_rank=2, seed=0)
        out = df.train_denoiser(data, cfg, model=net)
        assert out.base_checksum_before == out.base_checksum_after
        assert out.lora_wrapped == df.LORA_TARGETS

    def test_few_shot_corpus_size_accepted(self):
        data = phantom_tris(20, seed=3)
        cfg = df.DiffusionTrainConfig(epochs=1, batch_size=4, seed=0)
        out = df.train_denoiser(data, cfg, model=tiny_net())
        assert len(out.losses) == 5

    def test_empty_dataset(self):
        with pytest.raises(EmptyDataset):
            df.train_denoiser([], df.DiffusionTrainConfig())

    def test_nonfinite_loss_aborts_with_diagnostics(self):
        data = phantom_tris(4, seed=4)
        cfg = df.DiffusionTrainConfig(epochs=50, batch_size=4, learning_rate=1e12,
                                      seed=0)
        with pytest.raises(NonFiniteLoss, match="step"):
            df.train_denoiser(data, cfg, model=tiny_net())

    def test_ema_shadow_weights(self):
        data = phantom_tris(4, seed=12)
        cfg = df.DiffusionTrainConfig(epochs=5, batch_size=4, learning_rate=1e-3,
                                      seed=0, ema_decay=0.9)
        torch.manual_seed(3)
        out = df.train_denoiser(data, cfg, model=tiny_net())
        assert out.ema_model is not None
        assert out.ema_model.trained
        # shadow lags the raw weights, so the two models differ after training
        assert df.module_checksum(out.ema_model) != df.module_checksum(out.model)
        assert df.sample(out.ema_model, ds.Trimester.first,
                         df.SamplerConfig(steps=3, seed=0),
                         schedule=df.NoiseSchedule.linear(T=20)).planes.shape \
            == (3, 64, 64)

    def test_no_ema_by_default(self):
        data = phantom_tris(2, seed=13)
        out = df.train_denoiser(data, df.DiffusionTrainConfig(epochs=1, batch_size=2),
                                model=tiny_net())
        assert out.ema_model is None

    def test_deterministic_given_seed(self):
        data = phantom_tris(4, seed=5)
        cfg = df.DiffusionTrainConfig(epochs=2, batch_size=2, seed=11)
        torch.manual_seed(100)
        r1 = df.train_denoiser(data, cfg, model=tiny_net())
        torch.manual_seed(100)
        r2 = df.train_denoiser(data, cfg, model=tiny_net())
        assert r1.losses == r2.losses
        assert df.module_checksum(r1.model) == df.module_checksum(r2.model)


class TestSampler:
    def test_strided_timesteps(self):
        ts = df.strided_timesteps(400, 20)
        assert len(ts) == 20
        assert ts[0] == 400 and ts[-1] == 1
        assert all(a > b for a, b in zip(ts, ts[1:]))

    def test_deterministic_and_in_range(self):
        net = tiny_net(trained=True)
        cfg = df.SamplerConfig(steps=5, seed=42)
        a = df.sample(net, ds.Trimester.first, cfg)
        b = df.sample(net, ds.Trimester.first, cfg)
        assert np.array_equal(a.planes, b.planes)
        assert a.planes.shape == (3, 64, 64)
        assert a.planes.dtype == np.uint8

    def test_full_and_strided_sampling_valid(self):
        sched = df.NoiseSchedule.linear(T=25)
        net = tiny_net(trained=True)
        for steps in (25, 5):
            tri = df.sample(net, ds.Trimester.second, df.SamplerConfig(steps=steps, seed=0),
                            schedule=sched)
            assert tri.planes.min() >= 0 and tri.planes.max() <= 255

    def test_untrained_model_rejected(self):
        with pytest.raises(UntrainedModel):
            df.sample(tiny_net(trained=False), ds.Trimester.first, df.SamplerConfig())

    def test_steps_bounds_validated(self):
        net = tiny_net(trained=True)
        sched = df.NoiseSchedule.linear(T=10)
        with pytest.raises(ValueError):
            df.sample(net, ds.Trimester.first, df.SamplerConfig(steps=11), schedule=sched)

    def test_zeroed_adapters_sample_equals_base(self):
        torch.manual_seed(0)
        base = tiny_net(trained=True)
        import copy
        adapted = copy.deepcopy(base)
        lora.attach_adapters(adapted, df.LORA_TARGETS, r=2, seed=7)
        adapted.trained = True
        lora.zero_adapters(adapted)
        cfg = df.SamplerConfig(steps=4, seed=9)
        sched = df.NoiseSchedule.linear(T=20)
        a = df.sample(base, ds.Trimester.third, cfg, schedule=sched)
        b = df.sample(adapted, ds.Trimester.third, cfg, schedule=sched)
        assert np.array_equal(a.planes, b.planes)


class TestPerTrimester:
    def test_three_adapters_shared_base(self, caplog):
        import logging
        base = tiny_net(trained=True)
        datasets = {t: phantom_tris(4, seed=i, trimester=t)
                    for i, t in enumerate(ds.Trimester)}
        cfg = df.DiffusionTrainConfig(epochs=2, batch_size=4, lora_rank=2, seed=0)
        banks = df.train_per_trimester(datasets, base, cfg)
        assert set(banks) == set(ds.Trimester)
        checksums = {b.base_checksum for b in banks.values()}
        assert len(checksums) == 1  # shared frozen base
        with caplog.at_level(logging.INFO, logger="sonogen.diffusion"):
            adapted = df.apply_adapter(base, banks[ds.Trimester.first])
        assert "adapter-first" in caplog.text
        tri = df.sample(adapted, ds.Trimester.first, df.SamplerConfig(steps=3, seed=0),
                        schedule=df.NoiseSchedule.linear(T=20))
        assert tri.planes.shape == (3, 64, 64)

    def test_empty_trimester_rejected(self):
        base = tiny_net(trained=True)
        datasets = {ds.Trimester.first: phantom_tris(2, trimester=ds.Trimester.first),
                    ds.Trimester.second: [],
                    ds.Trimester.third: phantom_tris(2, trimester=ds.Trimester.third)}
        with pytest.raises(EmptyDataset):
            df.train_per_trimester(datasets, base, df.DiffusionTrainConfig(lora_rank=2))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        data = phantom_tris(4, seed=6)
        cfg = df.DiffusionTrainConfig(epochs=1, batch_size=4, seed=0)
        out = df.train_denoiser(data, cfg, model=tiny_net())
        sched = df.NoiseSchedule.linear()
        path = tmp_path / "model.pt"
        df.save_checkpoint(path, out.model, sched, cfg)
        model, sched2, cfg2, adapters = df.load_checkpoint(path)
        assert df.module_checksum(model) == df.module_checksum(out.model)
        assert np.array_equal(sched2.betas, sched.betas)
        assert cfg2 == cfg and adapters == {}
        tri = df.sample(model, ds.Trimester.second, df.SamplerConfig(steps=3, seed=1))
        assert tri.planes.shape == (3, 64, 64)
