import json
import os

import jsonschema
import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from udcsim.bench.ablation import (
    GENERATOR_VARIANTS, RESTORER_VARIANTS, AblationSpec, apply_generator_variant, build_generator_variant,
    build_restorer_variant, swapped_names, zeroed_branch,
)
from udcsim.bench.dataset import DatasetManifest, synthesize_dataset, write_images
from udcsim.bench.evaluate import EvalReport, evaluate, evaluate_images
from udcsim.bench.experiments import flat_probe, impulse_response, oracle_noise_variance, probe_degrader
from udcsim.bench.pipeline import OracleDegrader, split_indices
from udcsim.bench.schema import EVAL_SCHEMA
from udcsim.checkpoint import state_checksum
from udcsim.config import ExperimentConfig
from udcsim.diagnostics import changed_names, param_tree_diff
from udcsim.dwformer import RestorerConfig, freeze_bn, init_restorer
from udcsim.errors import ConfigError, IntegrityError, StateError
from udcsim.generator import GeneratorConfig, init_generator
from udcsim.imaging import Image, load_image, psnr, ssim
from udcsim.rng import RngStream
from udcsim.sgm import SgmConfig, preset, quantize, sgm_degrade

SMALL_G = GeneratorConfig(brightness_width=8, blur_width=8, blur_blocks=1, noise_dim=8)
TINY_R = RestorerConfig(widths=(8, 8, 8, 8, 8), blocks=(1, 0, 0, 0, 1))


def clean_dir(tmp_path, n=10, size=24):
    imgs = [Image(np.random.default_rng(i).uniform(size=(size, size + 4, 3))) for i in range(n)]
    d = tmp_path / "clean"
    write_images(imgs, d)
    return d


def randomized(model, seed, scale=0.2):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g) * scale)
    return model


def frozen(model, seed=0):
    with torch.no_grad():
        model(torch.rand(4, 3, 16, 16, generator=torch.Generator().manual_seed(seed)))
    return freeze_bn(model)


def identity_restorer():
    m = frozen(init_restorer(TINY_R, RngStream(0)))
    nn.init.zeros_(m.head.weight)
    nn.init.zeros_(m.head.bias)
    return m


class PerfectStub(nn.Module):
    """Looks up the clean partner of each degraded input."""

    def __init__(self, manifest):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(()))
        self.table = {}
        for e in manifest.entries:
            c, d = manifest.load_pair(e)
            self.table[torch.from_numpy(d.data.transpose(2, 0, 1)).float().numpy().tobytes()] = c.data

    def forward(self, x):
        outs = []
        for img in x:
            c = self.table[img.numpy().tobytes()]
            outs.append(torch.from_numpy(c.transpose(2, 0, 1)).float())
        return torch.stack(outs) * self.scale


class TestDataset:
    def test_cardinality_and_decodable(self, tmp_path):
        m = synthesize_dataset(clean_dir(tmp_path), preset("poled"), tmp_path / "out", RngStream(0))
        assert len(m) == 10 and len(DatasetManifest.load(tmp_path / "out")) == 10
        for e in m.entries:
            c, d = m.load_pair(e)
            assert c.shape == d.shape == (24, 28, 3)
            assert {"seed", "config_hash", "rng_path", "clean_sha256", "degraded_sha256"} <= set(e)
        m.verify()

    def test_same_seed_byte_identical(self, tmp_path):
        src = clean_dir(tmp_path, 4)
        a = synthesize_dataset(src, preset("poled"), tmp_path / "a", RngStream(3))
        b = synthesize_dataset(src, preset("poled"), tmp_path / "b", RngStream(3))
        c = synthesize_dataset(src, preset("poled"), tmp_path / "c", RngStream(4))
        for ea, eb in zip(a.entries, b.entries):
            assert (tmp_path / "a" / ea["degraded_path"]).read_bytes() == (tmp_path / "b" / eb["degraded_path"]).read_bytes()
        assert [e["degraded_sha256"] for e in a.entries] != [e["degraded_sha256"] for e in c.entries]

    def test_zero_noise_regeneration(self, tmp_path):
        cfg = SgmConfig(gamma=(0.3, 0.35, 0.4), psf=preset("poled").psf, bit_depth=8)
        m = synthesize_dataset(clean_dir(tmp_path, 5), cfg, tmp_path / "out", RngStream(0))
        for e in m.entries:
            clean, stored = m.load_pair(e)
            again = sgm_degrade(clean, cfg, RngStream(99))
            assert np.abs(again.data - stored.data).max() <= 1 / 255 + 1e-12

    def test_generator_degrader(self, tmp_path):
        G = randomized(init_generator(SMALL_G, RngStream(0)), 1, 0.05)
        m = synthesize_dataset(clean_dir(tmp_path, 3), G, tmp_path / "out", RngStream(0))
        assert {e["degrader"] for e in m.entries} == {"generator"}
        assert m.entries[0]["config_hash"] == state_checksum(G)[:16]
        d = m.load_pair(m.entries[0])[1].data
        np.testing.assert_allclose(d * 255, np.round(d * 255), atol=1e-9)

    def test_empty_dir(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(ConfigError):
            synthesize_dataset(tmp_path / "empty", preset("poled"), tmp_path / "out", RngStream(0))

    def test_unwritable(self, tmp_path):
        (tmp_path / "file").write_text("x")
        with pytest.raises(OSError):
            synthesize_dataset(clean_dir(tmp_path, 1), preset("poled"), tmp_path / "file" / "out", RngStream(0))

    @pytest.mark.parametrize("what", ["tamper", "delete"])
    def test_integrity(self, tmp_path, what):
        m = synthesize_dataset(clean_dir(tmp_path, 3), preset("poled"), tmp_path / "out", RngStream(0))
        target = tmp_path / "out" / m.entries[1]["degraded_path"]
        if what == "tamper":
            img = load_image(target).data.copy()
            img[0, 0, 0] = 1.0 - img[0, 0, 0]
            from udcsim.imaging import save_image

            save_image(Image(img), target)
        else:
            os.remove(target)
        with pytest.raises(IntegrityError):
            m.verify()
        with pytest.raises(IntegrityError):
            evaluate(identity_restorer(), m)


class TestEvaluate:
    @pytest.fixture
    def manifest(self, tmp_path):
        return synthesize_dataset(clean_dir(tmp_path, 4, 20), preset("toled"), tmp_path / "out", RngStream(0))

    def test_identity_matches_direct_metrics(self, manifest):
        rep = evaluate(identity_restorer(), manifest)
        for r, e in zip(rep.per_image, manifest.entries):
            c, d = manifest.load_pair(e)
            assert r["name"] == e["name"]
            assert r["psnr"] == pytest.approx(psnr(d, c), abs=1e-6)
            assert r["ssim"] == pytest.approx(ssim(d, c), abs=1e-6)
        assert rep.seed == 0 and rep.config_hash == manifest.entries[0]["config_hash"]
        assert rep.params > 0 and rep.macs > 0 and rep.macs_resolution == 256

    def test_perfect_stub(self, manifest):
        rep = evaluate(PerfectStub(manifest), manifest)
        assert rep.psnr == 99.0 and rep.ssim == pytest.approx(1.0, abs=1e-12)
        assert rep.params == 1 and rep.macs is None

    def test_aggregate_is_mean(self, manifest):
        rep = evaluate(frozen(randomized(init_restorer(TINY_R, RngStream(1)), 2, 0.05)), manifest)
        assert abs(rep.psnr - np.mean([r["psnr"] for r in rep.per_image])) <= 1e-9
        assert abs(rep.ssim - np.mean([r["ssim"] for r in rep.per_image])) <= 1e-9

    def test_does_not_mutate(self, manifest):
        m = frozen(init_restorer(TINY_R, RngStream(3)))
        m.train()
        before = state_checksum(m)
        evaluate(m, manifest)
        assert state_checksum(m) == before and m.training

    def test_needs_frozen(self, manifest):
        with pytest.raises(StateError):
            evaluate(init_restorer(TINY_R, RngStream(0)), manifest)

    def test_odd_sizes_padded(self):
        c = Image(np.random.default_rng(0).uniform(size=(13, 18, 3)))
        rep = evaluate_images(identity_restorer(), [c], [c])
        assert rep.psnr == 99.0

    def test_schema_and_round_trip(self, manifest):
        rep = evaluate(identity_restorer(), manifest, tag="x")
        d = json.loads(rep.to_json())
        jsonschema.validate(d, EVAL_SCHEMA)
        assert EvalReport.from_dict(d) == rep

    @given(st.lists(st.floats(0, 99), min_size=1, max_size=20))
    def test_aggregate_property(self, values):
        rep = EvalReport(per_image=[{"name": str(i), "psnr": v, "ssim": v / 99} for i, v in enumerate(values)])
        rep.aggregate()
        assert abs(rep.psnr - np.mean(values)) <= 1e-9


class TestAblationSpec:
    @pytest.mark.parametrize("spec", [
        AblationSpec(), AblationSpec("generator", "no-nq"), AblationSpec("restorer", "se-attention", ("l1-direct",)),
        AblationSpec("generator", "sgm-blur", ("adv", "sup", "l1-direct"), 0.5),
    ])
    def test_round_trip(self, spec):
        assert AblationSpec.parse(str(spec)) == spec

    @given(st.sampled_from(GENERATOR_VARIANTS), st.sets(st.sampled_from(("adv", "sup", "l1-direct")), min_size=1),
           st.floats(0, 1000, allow_nan=False))
    def test_round_trip_property(self, variant, losses, lam):
        spec = AblationSpec("generator", variant, tuple(sorted(losses)), lam)
        assert AblationSpec.parse(str(spec)) == spec

    def test_short_form(self):
        assert AblationSpec.parse("restorer/no-aca") == AblationSpec("restorer", "no-aca")

    @pytest.mark.parametrize("text", ["generator/no-xx", "restorer/no-nq", "decoder/full", "generator/full/adv+gan",
                                      "generator/full/adv/lam=-1", "generator/full/adv/lam=abc", "???"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            AblationSpec.parse(text)


class TestAblationMachinery:
    @pytest.mark.parametrize("variant", [v for v in GENERATOR_VARIANTS if v != "full"])
    def test_generator_diff_names_swapped_subtree(self, variant):
        full = init_generator(SMALL_G, RngStream(0))
        var = build_generator_variant(AblationSpec("generator", variant), SMALL_G, preset("poled"), RngStream(0))
        names = changed_names(param_tree_diff(full, var))
        assert swapped_names(names, variant), names
        # everything shared is untouched
        sv = var.state_dict()
        for k, v in full.state_dict().items():
            if k in sv:
                assert torch.equal(v, sv[k]), k

    @pytest.mark.parametrize("variant", [v for v in RESTORER_VARIANTS if v != "full"])
    def test_restorer_diff_names_swapped_subtree(self, variant):
        base = RestorerConfig(widths=(8, 12, 16, 12, 8), blocks=(1, 1, 1, 1, 1))
        full = build_restorer_variant(AblationSpec("restorer", "full"), base, RngStream(0))
        var = build_restorer_variant(AblationSpec("restorer", variant), base, RngStream(0))
        names = changed_names(param_tree_diff(full, var))
        assert swapped_names(names, variant), names

    def test_full_variant_identical(self):
        a = init_generator(SMALL_G, RngStream(0))
        b = build_generator_variant(AblationSpec(), SMALL_G, preset("poled"), RngStream(0))
        assert state_checksum(a) == state_checksum(b)

    @pytest.mark.parametrize("variant", ["no-nq", "no-nd", "no-ni"])
    def test_removed_branch_equals_zeroed(self, variant):
        full = randomized(init_generator(SMALL_G, RngStream(0)), 5)  # stands in for a trained generator
        var = apply_generator_variant(randomized(init_generator(SMALL_G, RngStream(0)), 5), variant)
        x = torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(1))
        with torch.no_grad(), zeroed_branch(full, variant):
            ref = full(x, RngStream(7))
        with torch.no_grad():
            out = var(x, RngStream(7))
            plain = full(x, RngStream(7))
        assert torch.equal(out, ref)
        assert not torch.equal(plain, ref)  # the branch matters, and the hook was removed

    def test_zeroed_branch_rejects_swaps(self):
        with pytest.raises(ConfigError):
            with zeroed_branch(init_generator(SMALL_G, RngStream(0)), "sgm-blur"):
                pass

    def test_se_attention_counts_differ(self):
        from udcsim.overhead import count_params

        base = RestorerConfig(widths=(8, 12, 16, 12, 8), blocks=(1, 1, 1, 1, 1))
        full = build_restorer_variant(AblationSpec("restorer", "full"), base, RngStream(0))
        se = build_restorer_variant(AblationSpec("restorer", "se-attention"), base, RngStream(0))
        assert count_params(full) > 0 and count_params(se) > 0 and count_params(full) != count_params(se)

    def test_sgm_variants_reproduce_oracle_stages(self):
        cfg = preset("poled")
        G = init_generator(SMALL_G, RngStream(0))
        for v in ("sgm-light", "sgm-blur", "sgm-noise"):
            apply_generator_variant(G, v, cfg)
        x = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        G = G.double()
        with torch.no_grad():
            dark = G.brightness(x)
            blur = G.blur(dark)
        torch.testing.assert_close(dark, x * torch.tensor(cfg.gamma, dtype=torch.float64)[None, :, None, None])
        ref = sgm_degrade(Image(dark[0].permute(1, 2, 0).numpy()),
                          SgmConfig(gamma=(1, 1, 1), psf=cfg.psf, bit_depth=None), RngStream(0))
        np.testing.assert_allclose(blur[0].permute(1, 2, 0).numpy(), ref.data, atol=1e-12)

    def test_sgm_variant_needs_config(self):
        with pytest.raises(ConfigError):
            apply_generator_variant(init_generator(SMALL_G, RngStream(0)), "sgm-noise")


class TestProbes:
    def test_oracle_probe_definitional(self):
        cfg = ExperimentConfig()
        deg = OracleDegrader(cfg.sgm)
        ratio, var = flat_probe(deg, 64, 0.5, 8, 4, RngStream(0))
        x = torch.full((4, 3, 64, 64), 0.5)
        y = deg(x, RngStream(0).split("flat-probe")).double()[:, :, 8:-8, 8:-8]
        np.testing.assert_allclose(ratio, y.mean(dim=(0, 2, 3)).numpy() / 0.5)
        np.testing.assert_allclose(ratio, cfg.sgm.gamma, rtol=0.01)
        np.testing.assert_allclose(var, oracle_noise_variance(cfg.sgm, 0.5), rtol=0.1)

    def test_oracle_impulse_recovers_psf(self):
        cfg = ExperimentConfig()
        resp = impulse_response(OracleDegrader(cfg.sgm), 9)
        for c in range(3):
            np.testing.assert_allclose(resp[c], cfg.sgm.psf, atol=1e-12)

    def test_probe_report_zero_deltas_for_oracle_impulse(self):
        cfg = ExperimentConfig()
        rep = probe_degrader(OracleDegrader(cfg.sgm), cfg, RngStream(0))
        assert max(rep["impulse"]["l1"]) <= 1e-10
        assert max(abs(e) for e in rep["brightness"]["rel_error"]) < 0.01

    def test_split(self):
        tr, va, te = split_indices(120, (0.8, 0.1, 0.1), RngStream(0))
        assert (len(tr), len(va), len(te)) == (96, 12, 12)
        assert sorted(np.concatenate([tr, va, te]).tolist()) == list(range(120))
        tr2, _, _ = split_indices(120, (0.8, 0.1, 0.1), RngStream(0))
        np.testing.assert_array_equal(tr, tr2)
