"""Closed-loop recovery experiment, generator probes and the ablation runner."""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from ..config import ExperimentConfig
from ..errors import ConfigError
from ..rng import RngStream
from ..sgm import SgmConfig, quantization_variance
from ..training import PairSet, train_generator
from .ablation import AblationSpec, build_generator_variant, restorer_variant_config
from .evaluate import EvalReport, evaluate_images
from .pipeline import OracleDegrader, build_corpus, fit_restorer, generated_pairs, oracle_pairs, split_indices

log = logging.getLogger(__name__)

MAX_PATCH = 128
MAX_PAIRS = 500


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


@torch.no_grad()
def flat_probe(degrader: nn.Module, size: int, level: float, margin: int, draws: int, rng: RngStream):
    """Degrade constant gray fields; return per-channel (mean / level, spatial variance) over the interior."""
    x = torch.full((draws, 3, size, size), float(level))
    y = degrader(x, rng.split("flat-probe")).double()
    inner = y[:, :, margin : size - margin, margin : size - margin]
    ratio = inner.mean(dim=(0, 2, 3)) / level
    var = inner.var(dim=(2, 3), unbiased=False).mean(dim=0)
    return ratio.numpy(), var.numpy()


def oracle_noise_variance(cfg: SgmConfig, level: float) -> np.ndarray:
    signal = np.asarray(cfg.gamma) * level  # the PSF preserves a constant field
    return cfg.noise_variance(signal) + quantization_variance(cfg.bit_depth)


def _blur_path(degrader: nn.Module):
    blur = getattr(degrader, "blur", None)
    if blur is None:
        raise ConfigError(f"{type(degrader).__name__} exposes no deterministic blur stage")
    return blur


@torch.no_grad()
def impulse_response(degrader: nn.Module, kernel_size: int, size: int = 32, background: float = 0.5,
                     amplitude: float = 0.25) -> np.ndarray:
    """Blur-stage response to a centered impulse on a gray background, cropped to ``kernel_size``.

    Returns a 3 x K x K array (unnormalized, in units of the impulse amplitude).
    """
    blur = _blur_path(degrader)
    c = size // 2
    x0 = torch.full((1, 3, size, size), background, dtype=torch.float64)
    x1 = x0.clone()
    x1[..., c, c] += amplitude
    params = list(degrader.parameters())
    dtype = params[0].dtype if params else torch.float64
    diff = (blur(x1.to(dtype)) - blur(x0.to(dtype))).double()[0] / amplitude
    r = kernel_size // 2
    return diff[:, c - r : c + r + 1, c - r : c + r + 1].numpy()


def impulse_comparison(response: np.ndarray, psf: np.ndarray) -> dict:
    mass = response.sum(axis=(1, 2))
    norm = response / np.where(np.abs(mass) > 1e-12, mass, 1.0)[:, None, None]
    l1 = np.abs(norm - psf[None]).sum(axis=(1, 2))
    return {"l1": l1.tolist(), "mass": mass.tolist(), "kernel_size": int(psf.shape[0])}


def probe_degrader(degrader: nn.Module, cfg: ExperimentConfig, rng: RngStream) -> dict:
    p = cfg.probes
    ratio, var = flat_probe(degrader, p.size, p.level, p.margin, p.draws, rng)
    gamma = np.asarray(cfg.sgm.gamma)
    target_var = oracle_noise_variance(cfg.sgm, p.level)
    response = impulse_response(degrader, cfg.sgm.psf.shape[0])
    return {
        "brightness": {"recovered": ratio.tolist(), "oracle": gamma.tolist(),
                       "rel_error": ((ratio - gamma) / gamma).tolist()},
        "noise_variance": {"recovered": var.tolist(), "oracle": target_var.tolist(),
                           "rel_error": ((var - target_var) / target_var).tolist()},
        "impulse": {**impulse_comparison(response, cfg.sgm.psf), "response": response.tolist()},
    }


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------


@dataclass
class PreparedData:
    cleans: list
    degraded: list
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def take(self, idx, which="clean"):
        src = self.cleans if which == "clean" else self.degraded
        return [src[i] for i in idx]


def check_desk_scale(cfg: ExperimentConfig):
    if cfg.data.n_images > MAX_PAIRS:
        raise ConfigError(f"closed-loop runs are limited to {MAX_PAIRS} pairs")
    for key in ("gan", "restorer", "pretrain"):
        if cfg.schedule[key].patch > MAX_PATCH:
            raise ConfigError(f"closed-loop patches are limited to {MAX_PATCH} pixels")


def prepare_data(cfg: ExperimentConfig, rng: RngStream) -> PreparedData:
    cleans = build_corpus(cfg.data, rng)
    degraded = oracle_pairs(cleans, cfg.sgm, rng)
    train, val, test = split_indices(len(cleans), cfg.data.split, rng)
    if len(train) == 0 or len(test) == 0:
        raise ConfigError("split leaves no training or no test images")
    return PreparedData(cleans, degraded, train, val, test)


def pretrain_restorer(data: PreparedData, cfg: ExperimentConfig, rng: RngStream, history_path=None):
    return fit_restorer(data.take(data.train), data.take(data.train, "degraded"), cfg.restorer,
                        cfg.schedule["pretrain"], rng.split("pretrain"), history_path)


def _path(out_dir, name):
    return os.path.join(out_dir, name) if out_dir else None


def closed_loop_experiment(cfg: ExperimentConfig, rng: RngStream, self_check: bool = False, out_dir=None,
                           callback=None) -> dict:
    """Fit a generator to oracle pairs, probe it, and compare restorers trained on generated vs oracle data.

    With ``self_check`` the generator is replaced by the oracle itself (fresh noise draws).
    """
    cfg = cfg.copy().validate()
    check_desk_scale(cfg)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    timing = {}
    t0 = time.perf_counter()
    data = prepare_data(cfg, rng)
    timing["data"] = time.perf_counter() - t0
    training = {}
    if self_check:
        degrader = OracleDegrader(cfg.sgm)
    else:
        t = time.perf_counter()
        R, hist = pretrain_restorer(data, cfg, rng, _path(out_dir, "pretrain_history.jsonl"))
        timing["pretrain"] = time.perf_counter() - t
        training["pretrain_loss"] = hist.series("loss")
        t = time.perf_counter()
        G, D, gan_hist = train_generator(
            PairSet.from_images(data.take(data.train), data.take(data.train, "degraded")), R,
            cfg.schedule["gan"], rng.split("gan"), gen_cfg=cfg.generator, disc_cfg=cfg.discriminator,
            history_path=_path(out_dir, "gan_history.jsonl"), callback=callback)
        timing["gan"] = time.perf_counter() - t
        training["gan"] = {k: gan_hist.series(k) for k in ("loss_d", "loss_g_adv", "loss_sup")}
        training["d_steps"], training["g_steps"] = gan_hist[-1]["d_steps"], gan_hist[-1]["g_steps"]
        G.eval()
        degrader = G
    probes = probe_degrader(degrader, cfg, rng.split("probes"))

    t = time.perf_counter()
    train_clean = data.take(data.train)
    synth = generated_pairs(train_clean, degrader, rng)
    transfer_rng = rng.split("transfer")  # identical init and batch order for both restorers
    R_gen, h_gen = fit_restorer(train_clean, synth, cfg.restorer, cfg.schedule["restorer"], transfer_rng,
                                _path(out_dir, "restorer_generated_history.jsonl"))
    R_orc, h_orc = fit_restorer(train_clean, data.take(data.train, "degraded"), cfg.restorer,
                                cfg.schedule["restorer"], transfer_rng, _path(out_dir, "restorer_oracle_history.jsonl"))
    timing["restorers"] = time.perf_counter() - t
    test_clean, test_deg = data.take(data.test), data.take(data.test, "degraded")
    names = [f"test_{i:04d}" for i in data.test]
    chash = cfg.config_hash()
    rep_gen = evaluate_images(R_gen, test_clean, test_deg, names, chash, rng.seed, "generated")
    rep_orc = evaluate_images(R_orc, test_clean, test_deg, names, chash, rng.seed, "oracle")
    training["restorer_generated_loss"] = h_gen.series("loss")
    training["restorer_oracle_loss"] = h_orc.series("loss")
    timing["total"] = time.perf_counter() - t0
    return {
        "kind": "closed-loop",
        "self_check": bool(self_check),
        "seed": rng.seed,
        "config_hash": chash,
        "config": cfg.to_dict(),
        "split": {"train": len(data.train), "val": len(data.val), "test": len(data.test)},
        "probes": probes,
        "restorers": {"generated": rep_gen.to_dict(), "oracle": rep_orc.to_dict()},
        "psnr_gap_db": rep_orc.psnr - rep_gen.psnr,
        "ssim_gap": rep_orc.ssim - rep_gen.ssim,
        "training": training,
        "timing_s": timing,
    }


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------


def run_ablation(spec: AblationSpec, base_config: ExperimentConfig, rng: RngStream, out_dir=None) -> EvalReport:
    """Train the variant named by ``spec`` through the desk-scale pipeline and score it on held-out oracle pairs.

    Generator variants are judged by the restorer they produce: the restorer is
    trained on pairs the variant generates and tested on oracle pairs.
    """
    if not isinstance(spec, AblationSpec):
        raise ConfigError("run_ablation needs an AblationSpec")
    cfg = base_config.copy().validate()
    check_desk_scale(cfg)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    data = prepare_data(cfg, rng)
    train_clean = data.take(data.train)
    if spec.target == "generator":
        gan_cfg = cfg.schedule["gan"]
        gan_cfg.losses, gan_cfg.lam = spec.losses, spec.lam
        R = pretrain_restorer(data, cfg, rng)[0] if "sup" in spec.losses else None
        G = build_generator_variant(spec, cfg.generator, cfg.sgm, rng)
        G, _, _ = train_generator(
            PairSet.from_images(train_clean, data.take(data.train, "degraded")), R, gan_cfg, rng.split("gan"),
            generator=G, disc_cfg=cfg.discriminator, history_path=_path(out_dir, "gan_history.jsonl"))
        model, _ = fit_restorer(train_clean, generated_pairs(train_clean, G, rng), cfg.restorer,
                                cfg.schedule["restorer"], rng.split("transfer"))
    else:
        model_cfg = restorer_variant_config(cfg.restorer, spec.variant)
        model, _ = fit_restorer(train_clean, data.take(data.train, "degraded"), model_cfg,
                                cfg.schedule["restorer"], rng.split("transfer"),
                                _path(out_dir, "restorer_history.jsonl"))
    names = [f"test_{i:04d}" for i in data.test]
    return evaluate_images(model, data.take(data.test), data.take(data.test, "degraded"), names,
                           cfg.config_hash(), rng.seed, str(spec))
