import math

import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings, strategies as st

from udcsim.checkpoint import state_checksum
from udcsim.discriminator import DiscriminatorConfig
from udcsim.dwformer import DWFormer, RestorerConfig, freeze_bn, init_restorer, is_frozen
from udcsim.errors import ConfigError, DimensionError, StateError, TrainingAborted
from udcsim.generator import GeneratorConfig
from udcsim.imaging import Image
from udcsim.rng import RngStream
from udcsim.training import (
    GanTrainConfig, PairSet, RestoreTrainConfig, adversarial_losses, cosine_lr, supervised_loss,
    total_generator_loss, train_generator, train_restorer,
)

TINY_R = RestorerConfig(widths=(8, 8, 8, 8, 8), blocks=(1, 0, 0, 0, 1))
TINY_G = GeneratorConfig(brightness_width=8, blur_width=8, blur_blocks=1, noise_dim=4)
TINY_D = DiscriminatorConfig(widths=(4, 8, 8))


def synthetic_pairs(n=16, size=64, seed=0):
    g = np.random.default_rng(seed)
    clean = g.uniform(size=(n, size, size, 3)).astype(np.float32)
    degraded = np.clip(0.4 * clean + g.normal(0, 0.02, clean.shape), 0, 1).astype(np.float32)
    return PairSet(clean, degraded)


def frozen_tiny_restorer(seed=0):
    m = init_restorer(TINY_R, RngStream(seed))
    with torch.no_grad():
        m(torch.rand(4, 3, 16, 16, generator=torch.Generator().manual_seed(seed)))
    return freeze_bn(m)


def gan_cfg(**kw):
    base = dict(total_iters=5, batch=2, patch=32, lr_g=1e-4, lr_g_min=1e-6, lr_d=1e-3, lr_d_min=1e-5)
    base.update(kw)
    return GanTrainConfig(**base)


class TestLosses:
    def test_perfect_discriminator(self):
        ld, lg = adversarial_losses(torch.ones(2, 8, 8, 1), torch.zeros(2, 8, 8, 1))
        assert ld.item() == 0.0 and lg.item() == 1.0

    def test_half_maps(self):
        ld, lg = adversarial_losses(torch.full((2, 4, 4, 1), 0.5), torch.full((2, 4, 4, 1), 0.5))
        assert ld.item() == pytest.approx(0.5, abs=1e-12) and lg.item() == pytest.approx(0.25, abs=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_non_negative(self, seed):
        g = torch.Generator().manual_seed(seed)
        ld, lg = adversarial_losses(torch.rand(2, 4, 4, 1, generator=g), torch.rand(2, 4, 4, 1, generator=g))
        assert ld.item() >= 0 and lg.item() >= 0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adversarial_losses(torch.rand(1, 4, 4, 1), torch.rand(1, 4, 5, 1))

    def test_supervised_identical(self):
        y = torch.rand(2, 3, 16, 16)
        assert supervised_loss(frozen_tiny_restorer(), y, y).item() == 0.0

    def test_supervised_identity_offset(self):
        r = frozen_tiny_restorer()
        torch.nn.init.zeros_(r.head.weight)
        torch.nn.init.zeros_(r.head.bias)
        y = torch.rand(2, 3, 16, 16) * 0.5
        assert supervised_loss(r, y + 0.1, y).item() == pytest.approx(0.1, abs=1e-7)

    def test_supervised_direct_sum(self):
        r = frozen_tiny_restorer(1).double()
        g = torch.Generator().manual_seed(3)
        a, b = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64), torch.rand(2, 3, 16, 16, generator=g,
                                                                                      dtype=torch.float64)
        with torch.no_grad():
            ra, rb = r(a).numpy(), r(b).numpy()
            total = sum(abs(p - q) for p, q in zip(ra.ravel(), rb.ravel())) / ra.size
            assert abs(supervised_loss(r, a, b).item() - total) <= 1e-9

    def test_supervised_needs_frozen(self):
        y = torch.rand(1, 3, 16, 16)
        with pytest.raises(StateError):
            supervised_loss(DWFormer(TINY_R), y, y)

    def test_total(self):
        assert total_generator_loss(0.25, 0.1, 10.0) == pytest.approx(1.25, abs=1e-15)
        assert total_generator_loss(0.25, 0.1, 0.0) == 0.25
        with pytest.raises(ConfigError):
            total_generator_loss(0.25, 0.1, -1.0)

    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 100))
    def test_lambda_linearity(self, adv, sup, lam):
        one = total_generator_loss(adv, sup, lam) - adv
        two = total_generator_loss(adv, sup, 2 * lam) - adv
        assert two == pytest.approx(2 * one, rel=1e-12, abs=1e-12)

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_lambda_orderings(self, s1, s2):
        assume(abs(s1 - s2) > 1e-9)  # keep clear of rounding ties
        for lam in (1.0, 100.0):
            assert (total_generator_loss(0.3, s1, lam) <= total_generator_loss(0.3, s2, lam)) == (s1 <= s2)


class TestCosine:
    @pytest.mark.parametrize("hi,lo", [(1e-4, 1e-6), (1e-3, 1e-5)])
    def test_endpoints(self, hi, lo):
        assert cosine_lr(0, 1000, hi, lo) == hi
        assert cosine_lr(1000, 1000, hi, lo) == pytest.approx(lo, rel=1e-12)

    def test_midpoint(self):
        assert abs(cosine_lr(500, 1000, 1e-4, 1e-6) - 5.05e-5) <= 1e-12

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(11, 10, 1e-4, 1e-6)
        with pytest.raises(ValueError):
            cosine_lr(-1, 10, 1e-4, 1e-6)

    @given(st.integers(1, 5000))
    @settings(max_examples=30)
    def test_monotone(self, total):
        lrs = [cosine_lr(s, total, 1e-3, 1e-5) for s in range(0, total + 1, max(1, total // 97))]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestConfigs:
    def test_defaults(self):
        g, r = GanTrainConfig(), RestoreTrainConfig()
        assert (g.total_iters, g.lr_g, g.lr_g_min, g.lr_d, g.lr_d_min) == (60_000, 1e-4, 1e-6, 1e-3, 1e-5)
        assert (g.beta1, g.beta2, g.d_steps_per_g_step, g.batch, g.lam) == (0.5, 0.999, 3, 8, 10.0)
        assert g.augmentation == "flips-only" and g.ema_decay == 0.0
        assert (r.total_iters, r.lr, r.lr_min, r.batch, r.bn_freeze_fraction) == (200_000, 1e-4, 1e-6, 64, 0.8)
        assert (r.beta1, r.augmentation) == (0.9, "flips-and-rotations")

    @pytest.mark.parametrize("fraction", [0.0, 1.5])
    def test_bad_freeze_fraction(self, fraction):
        with pytest.raises(ConfigError):
            RestoreTrainConfig(bn_freeze_fraction=fraction).validate()

    @pytest.mark.parametrize("kw", [{"lam": -1}, {"batch": 0}, {"lr_d": 0}, {"losses": ("adv", "perceptual")},
                                    {"losses": ()}, {"ema_decay": 1.0}])
    def test_bad_gan(self, kw):
        with pytest.raises(ConfigError):
            GanTrainConfig(**kw).validate()

    def test_round_trip(self):
        c = gan_cfg(lam=3.0)
        assert GanTrainConfig.from_dict(c.to_dict()) == c
        with pytest.raises(ConfigError):
            RestoreTrainConfig.from_dict({"iters": 3})


class TestData:
    def test_empty(self):
        with pytest.raises(ConfigError):
            PairSet(np.zeros((0, 8, 8, 3)), np.zeros((0, 8, 8, 3)))

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            PairSet(np.zeros((2, 8, 8, 3)), np.zeros((2, 8, 9, 3)))

    def test_sample_aligned_and_deterministic(self):
        pairs = PairSet.from_images([Image(np.random.default_rng(i).uniform(size=(20, 20, 3))) for i in range(3)],
                                    [Image(np.random.default_rng(i).uniform(size=(20, 20, 3)) * 0.5)
                                     for i in range(3)])
        c1, d1 = pairs.sample(4, 8, "flips-and-rotations", RngStream(1))
        c2, d2 = pairs.sample(4, 8, "flips-and-rotations", RngStream(1))
        assert c1.shape == (4, 3, 8, 8) and torch.equal(c1, c2) and torch.equal(d1, d2)
        torch.testing.assert_close(d1, c1 * 0.5)


class TestGanLoop:
    def test_step_ratio(self):
        pairs = synthetic_pairs(8, 32)
        _, _, h = train_generator(pairs, frozen_tiny_restorer(), gan_cfg(total_iters=12), RngStream(0),
                                  gen_cfg=TINY_G, disc_cfg=TINY_D)
        assert h[-1]["d_steps"] == 3 * h[-1]["g_steps"] == 36
        assert all(r["d_steps"] == 3 * r["g_steps"] for r in h)
        assert [r["lr_g"] for r in h][0] == 1e-4

    def test_restorer_untouched(self):
        r = frozen_tiny_restorer()
        before = state_checksum(r)
        train_generator(synthetic_pairs(8, 32), r, gan_cfg(), RngStream(1), gen_cfg=TINY_G, disc_cfg=TINY_D)
        assert state_checksum(r) == before

    def test_unfrozen_restorer_rejected(self):
        with pytest.raises(StateError):
            train_generator(synthetic_pairs(4, 32), DWFormer(TINY_R), gan_cfg(), RngStream(0), gen_cfg=TINY_G,
                            disc_cfg=TINY_D)

    def test_empty(self):
        with pytest.raises(ConfigError):
            train_generator(None, frozen_tiny_restorer(), gan_cfg(), RngStream(0), gen_cfg=TINY_G, disc_cfg=TINY_D)

    def test_deterministic(self):
        run = lambda: train_generator(synthetic_pairs(8, 32), frozen_tiny_restorer(), gan_cfg(), RngStream(4),
                                      gen_cfg=TINY_G, disc_cfg=TINY_D)
        (g1, d1, h1), (g2, d2, h2) = run(), run()
        assert [r["loss_g"] for r in h1] == [r["loss_g"] for r in h2]
        assert state_checksum(g1) == state_checksum(g2) and state_checksum(d1) == state_checksum(d2)

    def test_nan_aborts_without_update(self):
        pairs = synthetic_pairs(4, 32)
        pairs.degraded[:] = np.nan
        from udcsim.discriminator import init_discriminator
        from udcsim.generator import init_generator

        G, D = init_generator(TINY_G, RngStream(0)), init_discriminator(TINY_D, RngStream(0))
        sums = state_checksum(G), state_checksum(D)
        with pytest.raises(TrainingAborted) as info:
            train_generator(pairs, frozen_tiny_restorer(), gan_cfg(), RngStream(0), generator=G, discriminator=D)
        assert info.value.step == 0
        assert (state_checksum(G), state_checksum(D)) == sums

    def test_l1_only_needs_no_restorer(self):
        _, _, h = train_generator(synthetic_pairs(4, 32), None, gan_cfg(losses=("l1-direct",), total_iters=2),
                                  RngStream(0), gen_cfg=TINY_G, disc_cfg=TINY_D)
        assert h[-1]["loss_sup"] == 0.0 and h[-1]["loss_g_adv"] == 0.0 and h[-1]["loss_l1"] > 0

    def test_weight_average(self):
        pairs = synthetic_pairs(4, 32)
        G_avg, _, _ = train_generator(pairs, frozen_tiny_restorer(), gan_cfg(ema_decay=0.5), RngStream(2),
                                      gen_cfg=TINY_G, disc_cfg=TINY_D)
        G_raw, _, _ = train_generator(pairs, frozen_tiny_restorer(), gan_cfg(), RngStream(2), gen_cfg=TINY_G,
                                      disc_cfg=TINY_D)
        assert state_checksum(G_avg) != state_checksum(G_raw)
        assert not any(p.requires_grad for p in G_avg.parameters())

    def test_checkpoints(self, tmp_path):
        train_generator(synthetic_pairs(4, 32), frozen_tiny_restorer(), gan_cfg(total_iters=4, checkpoint_fraction=0.5),
                        RngStream(0), gen_cfg=TINY_G, disc_cfg=TINY_D, out_dir=tmp_path,
                        history_path=tmp_path / "h.jsonl")
        names = sorted(p.name for p in tmp_path.iterdir())
        assert "generator_0000002.ckpt" in names and "discriminator_0000004.ckpt" in names
        assert len((tmp_path / "h.jsonl").read_text().splitlines()) == 4

    @pytest.mark.slow
    def test_smoke_200(self):
        _, _, h = train_generator(synthetic_pairs(16, 64), frozen_tiny_restorer(),
                                  gan_cfg(total_iters=200, batch=2, patch=64), RngStream(5), gen_cfg=TINY_G,
                                  disc_cfg=TINY_D)
        assert len(h) == 200
        for r in h:
            assert all(math.isfinite(v) for k, v in r.items() if k.startswith("loss"))


class TestRestorerLoop:
    def cfg(self, **kw):
        base = dict(total_iters=10, batch=2, patch=16, lr=1e-3, lr_min=1e-5)
        base.update(kw)
        return RestoreTrainConfig(**base)

    def test_freeze_event(self):
        model, h = train_restorer(synthetic_pairs(4, 16), self.cfg(total_iters=13), RngStream(0), model_cfg=TINY_R)
        events = [r for r in h if r.get("event") == "bn_freeze"]
        assert len(events) == 1 and events[0]["step"] == math.floor(0.8 * 13)
        assert is_frozen(model)

    def test_freeze_at_end_when_fraction_one(self):
        model, h = train_restorer(synthetic_pairs(4, 16), self.cfg(bn_freeze_fraction=1.0), RngStream(0),
                                  model_cfg=TINY_R)
        assert is_frozen(model) and h[-1] == {"step": 10, "event": "bn_freeze"}

    def test_deterministic(self):
        a = train_restorer(synthetic_pairs(4, 16), self.cfg(), RngStream(7), model_cfg=TINY_R)[1].series("loss")
        b = train_restorer(synthetic_pairs(4, 16), self.cfg(), RngStream(7), model_cfg=TINY_R)[1].series("loss")
        c = train_restorer(synthetic_pairs(4, 16), self.cfg(), RngStream(8), model_cfg=TINY_R)[1].series("loss")
        assert a == b and a != c

    def test_nan_aborts_without_update(self):
        pairs = synthetic_pairs(4, 16)
        pairs.clean[:] = np.inf
        model = init_restorer(TINY_R, RngStream(0))
        before = state_checksum(model)
        with pytest.raises(TrainingAborted):
            train_restorer(pairs, self.cfg(), RngStream(0), model=model)
        assert state_checksum(model) == before

    def test_loss_decreases(self):
        _, h = train_restorer(synthetic_pairs(8, 32), self.cfg(total_iters=60, batch=4, patch=32, lr=3e-3),
                              RngStream(1), model_cfg=TINY_R)
        loss = h.series("loss")
        assert np.mean(loss[-10:]) < 0.5 * loss[0]

    def test_best_by_validation(self, tmp_path):
        train_restorer(synthetic_pairs(4, 16), self.cfg(checkpoint_fraction=0.5, bn_freeze_fraction=0.5),
                       RngStream(0), model_cfg=TINY_R, out_dir=tmp_path, validate=lambda m: 1.0)
        assert (tmp_path / "restorer_best.ckpt").exists() and (tmp_path / "restorer_0000010.ckpt").exists()
