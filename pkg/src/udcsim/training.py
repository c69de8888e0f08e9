"""Losses, learning-rate schedule, and the adversarial / supervised training loops."""
from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import save_checkpoint
from .discriminator import DiscriminatorConfig, UNetDiscriminator, init_discriminator
from .dwformer import DWFormer, RestorerConfig, freeze_bn, init_restorer, is_frozen
from .errors import ConfigError, DimensionError, StateError, TrainingAborted
from .generator import GeneratorConfig, MPGNet, init_generator
from .imaging import Image, augment, crop_patches
from .rng import RngStream

log = logging.getLogger(__name__)

LOSS_TERMS = ("adv", "sup", "l1-direct")


# ---------------------------------------------------------------------------
# losses and schedule
# ---------------------------------------------------------------------------


def adversarial_losses(d_real, d_fake):
    """Least-squares GAN losses on probability maps: (discriminator loss, generator loss)."""
    if d_real.shape != d_fake.shape:
        raise DimensionError(f"real map {tuple(d_real.shape)} vs fake map {tuple(d_fake.shape)}")
    loss_d = ((d_real - 1) ** 2).mean() + (d_fake**2).mean()
    loss_g = ((d_fake - 1) ** 2).mean()
    return loss_d, loss_g


def supervised_loss(restorer: nn.Module, generated, real_degraded):
    """Mean absolute difference between the restorations of generated and real degraded images."""
    if not is_frozen(restorer):
        raise StateError("supervised loss needs a restorer in frozen-norm mode")
    if generated.shape != real_degraded.shape:
        raise DimensionError("generated and real batches differ in shape")
    return (restorer(generated) - restorer(real_degraded)).abs().mean()


def total_generator_loss(loss_g_adv, loss_sup, lam: float):
    if lam < 0:
        raise ConfigError("lambda must be non-negative")
    return loss_g_adv + lam * loss_sup


def cosine_lr(step, total, lr_init, lr_min) -> float:
    if total <= 0 or not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * step / total))


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


class _ConfigMixin:
    @classmethod
    def from_dict(cls, d: dict):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class GanTrainConfig(_ConfigMixin):
    total_iters: int = 60_000
    beta1: float = 0.5
    beta2: float = 0.999
    lr_g: float = 1e-4
    lr_g_min: float = 1e-6
    lr_d: float = 1e-3
    lr_d_min: float = 1e-5
    d_steps_per_g_step: int = 3
    batch: int = 8
    patch: int = 256
    lam: float = 10.0
    losses: tuple = ("adv", "sup")
    augmentation: str = "flips-only"
    grad_clip: Optional[float] = None
    checkpoint_fraction: float = 0.05
    ema_decay: float = 0.0  # > 0 returns an exponential moving average of the generator weights

    def validate(self):
        self.losses = tuple(self.losses)
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if min(self.total_iters, self.batch, self.patch, self.d_steps_per_g_step) <= 0:
            raise ConfigError("iteration counts, batch and patch sizes must be positive")
        if min(self.lr_g, self.lr_d, self.lr_g_min, self.lr_d_min) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if not self.losses or set(self.losses) - set(LOSS_TERMS):
            raise ConfigError(f"losses must be a non-empty subset of {LOSS_TERMS}")
        return self


@dataclass
class RestoreTrainConfig(_ConfigMixin):
    total_iters: int = 200_000
    beta1: float = 0.9
    beta2: float = 0.999
    lr: float = 1e-4
    lr_min: float = 1e-6
    batch: int = 64
    patch: int = 256
    augmentation: str = "flips-and-rotations"
    bn_freeze_fraction: float = 0.8
    grad_clip: Optional[float] = None
    checkpoint_fraction: float = 0.05

    def validate(self):
        if min(self.total_iters, self.batch, self.patch) <= 0:
            raise ConfigError("iteration counts, batch and patch sizes must be positive")
        if min(self.lr, self.lr_min) <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 < self.bn_freeze_fraction <= 1.0:
            raise ConfigError("bn_freeze_fraction must lie in (0, 1]; freezing needs accumulated statistics")
        return self


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


class PairSet:
    """In-memory aligned clean/degraded arrays of shape N x H x W x 3."""

    def __init__(self, clean, degraded):
        self.clean = np.asarray(clean, dtype=np.float32)
        self.degraded = np.asarray(degraded, dtype=np.float32)
        if self.clean.shape != self.degraded.shape or self.clean.ndim != 4:
            raise DimensionError("clean and degraded stacks must share an N x H x W x 3 shape")
        if len(self.clean) == 0:
            raise ConfigError("dataset is empty")

    @classmethod
    def from_images(cls, clean, degraded) -> "PairSet":
        return cls(np.stack([c.data for c in clean]), np.stack([d.data for d in degraded]))

    def __len__(self):
        return len(self.clean)

    def subset(self, idx) -> "PairSet":
        idx = np.asarray(idx)
        return PairSet(self.clean[idx], self.degraded[idx])

    def sample(self, batch: int, size: int, mode: str, rng: RngStream):
        """Random aligned patches, one image per draw; returns two N x 3 x size x size tensors."""
        gen = rng.numpy
        cs, ds = [], []
        for _ in range(batch):
            i = int(gen.integers(len(self)))
            pair = (Image(self.clean[i]), Image(self.degraded[i]))
            p = augment(crop_patches(pair, size, 1, rng)[0], mode, rng)
            cs.append(p.clean.data)
            ds.append(p.degraded.data)
        to_t = lambda a: torch.from_numpy(np.ascontiguousarray(np.stack(a).transpose(0, 3, 1, 2))).float()
        return to_t(cs), to_t(ds)


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------


def _check_finite(step, losses: dict):
    vals = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in losses.items()}
    bad = {k: v for k, v in vals.items() if not math.isfinite(v)}
    if bad:
        raise TrainingAborted(f"non-finite loss at step {step}: {bad}", step=step, losses=bad)


def _check_grads(step, module, what):
    for name, p in module.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise TrainingAborted(f"non-finite gradient in {what}.{name} at step {step}", step=step)


class _BufferGuard:
    """Restores module buffers (running statistics) if the step aborts."""

    def __init__(self, *modules):
        self.saved = [(b, b.clone()) for m in modules for b in m.buffers()]

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None and issubclass(exc_type, TrainingAborted):
            with torch.no_grad():
                for b, v in self.saved:
                    b.copy_(v)
        return False


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _checkpoint_steps(total, fraction):
    if not fraction or fraction <= 0:
        return set()
    every = max(1, int(round(total * fraction)))
    return set(range(every, total + 1, every))


class History(list):
    """Per-step records; also written to a JSONL file when ``path`` is given."""

    def __init__(self, path=None):
        super().__init__()
        self._fh = open(path, "w") if path else None

    def append(self, rec):
        super().append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None

    def series(self, key):
        return [r[key] for r in self if key in r]


def train_generator(real_pairs: PairSet, restorer: Optional[nn.Module], cfg: GanTrainConfig, rng: RngStream,
                    generator: Optional[nn.Module] = None, discriminator: Optional[nn.Module] = None,
                    gen_cfg: Optional[GeneratorConfig] = None, disc_cfg: Optional[DiscriminatorConfig] = None,
                    out_dir=None, history_path=None, callback: Optional[Callable] = None):
    """Adversarial generator training: per iteration, ``d_steps_per_g_step`` discriminator
    updates on fresh batches, then one generator update on ``adv + lam * sup``.

    Returns ``(generator, discriminator, history)``; with ``ema_decay > 0`` the
    returned generator (and the one handed to ``callback``) is the weight average.
    """
    cfg = cfg.validate()
    if real_pairs is None or len(real_pairs) == 0:
        raise ConfigError("training needs at least one real pair")
    uses_sup = "sup" in cfg.losses
    if uses_sup:
        if restorer is None:
            raise ConfigError("the supervised loss needs a pre-trained restorer")
        if not is_frozen(restorer):
            raise StateError("the pre-trained restorer must be in frozen-norm mode")
        restorer.requires_grad_(False)
        restorer.eval()
    G = generator if generator is not None else init_generator(gen_cfg, rng)
    D = discriminator if discriminator is not None else init_discriminator(disc_cfg, rng)
    G.train()
    D.train()
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.lr_g, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr_d, betas=(cfg.beta1, cfg.beta2))
    ckpt_steps = _checkpoint_steps(cfg.total_iters, cfg.checkpoint_fraction) if out_dir else set()
    history = History(history_path)
    data_rng = rng.split("gan-data")
    noise_rng = rng.split("gan-noise")
    d_steps = g_steps = 0
    G_avg = _ema_copy(G) if cfg.ema_decay > 0 else G
    try:
        for it in range(cfg.total_iters):
            lr_g = cosine_lr(it, cfg.total_iters, cfg.lr_g, cfg.lr_g_min)
            lr_d = cosine_lr(it, cfg.total_iters, cfg.lr_d, cfg.lr_d_min)
            _set_lr(opt_g, lr_g)
            _set_lr(opt_d, lr_d)

            d_losses = []
            for k in range(cfg.d_steps_per_g_step):
                clean, real = real_pairs.sample(cfg.batch, cfg.patch, cfg.augmentation, data_rng)
                with torch.no_grad():
                    fake = G(clean, noise_rng.split(f"{it}/d{k}"))
                loss_d, _ = adversarial_losses(D(clean, real), D(clean, fake))
                _check_finite(it, {"loss_d": loss_d})
                opt_d.zero_grad(set_to_none=True)
                loss_d.backward()
                _check_grads(it, D, "discriminator")
                if cfg.grad_clip:
                    nn.utils.clip_grad_norm_(D.parameters(), cfg.grad_clip)
                opt_d.step()
                d_steps += 1
                d_losses.append(loss_d.item())

            clean, real = real_pairs.sample(cfg.batch, cfg.patch, cfg.augmentation, data_rng)
            fake = G(clean, noise_rng.split(f"{it}/g"))
            zero = fake.new_zeros(())
            loss_adv = zero
            if "adv" in cfg.losses:
                D.requires_grad_(False)
                d_fake = D(clean, fake)
                D.requires_grad_(True)
                loss_adv = adversarial_losses(d_fake, d_fake)[1]
            loss_sup = supervised_loss(restorer, fake, real) if uses_sup else zero
            loss_l1 = (fake - real).abs().mean() if "l1-direct" in cfg.losses else zero
            loss_g = total_generator_loss(loss_adv, loss_sup + loss_l1, cfg.lam)
            rec = {"step": it, "loss_d": float(np.mean(d_losses)), "loss_g_adv": loss_adv.item(),
                   "loss_sup": loss_sup.item(), "loss_l1": loss_l1.item(), "loss_g": loss_g.item(),
                   "lr_g": lr_g, "lr_d": lr_d}
            _check_finite(it, {k: v for k, v in rec.items() if k.startswith("loss")})
            opt_g.zero_grad(set_to_none=True)
            loss_g.backward()
            _check_grads(it, G, "generator")
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(G.parameters(), cfg.grad_clip)
            opt_g.step()
            g_steps += 1
            if G_avg is not G:
                _ema_update(G_avg, G, cfg.ema_decay)
            rec.update(d_steps=d_steps, g_steps=g_steps)
            history.append(rec)
            if callback is not None:
                callback(rec, G_avg, D)
            if it + 1 in ckpt_steps:
                _save_pair(out_dir, G_avg, D, it + 1)
    finally:
        history.close()
    return G_avg, D, history


def _ema_copy(model: nn.Module) -> nn.Module:
    avg = copy.deepcopy(model)
    avg.requires_grad_(False)
    return avg


@torch.no_grad()
def _ema_update(avg: nn.Module, model: nn.Module, decay: float):
    for pa, p in zip(avg.parameters(), model.parameters()):
        pa.lerp_(p, 1.0 - decay)
    for ba, b in zip(avg.buffers(), model.buffers()):
        ba.copy_(b)


def _save_pair(out_dir, G, D, step):
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(os.path.join(out_dir, f"generator_{step:07d}.ckpt"), G, "generator", G.cfg.to_dict(), step)
    save_checkpoint(os.path.join(out_dir, f"discriminator_{step:07d}.ckpt"), D, "discriminator",
                    D.cfg.to_dict(), step)


def train_restorer(pairs: PairSet, cfg: RestoreTrainConfig, rng: RngStream, model: Optional[DWFormer] = None,
                   model_cfg: Optional[RestorerConfig] = None, out_dir=None, history_path=None,
                   validate: Optional[Callable] = None, callback: Optional[Callable] = None):
    """L1 training of the restorer; norms switch to frozen statistics at
    ``floor(bn_freeze_fraction * total_iters)``.

    ``validate(model) -> float`` (higher is better) enables best-by-validation
    checkpoints at each checkpoint step. Returns ``(model, history)``.
    """
    cfg = cfg.validate()
    if pairs is None or len(pairs) == 0:
        raise ConfigError("training needs at least one pair")
    model = model if model is not None else init_restorer(model_cfg, rng)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    freeze_at = max(1, math.floor(cfg.bn_freeze_fraction * cfg.total_iters))  # at least one batch of statistics
    ckpt_steps = _checkpoint_steps(cfg.total_iters, cfg.checkpoint_fraction) if out_dir else set()
    data_rng = rng.split("restore-data")
    history = History(history_path)
    best = -math.inf
    try:
        for it in range(cfg.total_iters):
            if it == freeze_at and not is_frozen(model):
                freeze_bn(model)
                history.append({"step": it, "event": "bn_freeze"})
            lr = cosine_lr(it, cfg.total_iters, cfg.lr, cfg.lr_min)
            _set_lr(opt, lr)
            clean, degraded = pairs.sample(cfg.batch, cfg.patch, cfg.augmentation, data_rng)
            with _BufferGuard(model):
                loss = (model(degraded) - clean).abs().mean()
                _check_finite(it, {"loss": loss})
                opt.zero_grad(set_to_none=True)
                loss.backward()
                _check_grads(it, model, "restorer")
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            rec = {"step": it, "loss": loss.item(), "lr": lr}
            history.append(rec)
            if callback is not None:
                callback(rec, model)
            if it + 1 in ckpt_steps:
                os.makedirs(out_dir, exist_ok=True)
                save_checkpoint(os.path.join(out_dir, f"restorer_{it + 1:07d}.ckpt"), model, "restorer",
                                model.cfg.to_dict(), it + 1)
                if validate is not None and is_frozen(model):
                    score = float(validate(model))
                    if score > best:
                        best = score
                        save_checkpoint(os.path.join(out_dir, "restorer_best.ckpt"), model, "restorer",
                                        model.cfg.to_dict(), it + 1, {"validation": score})
    finally:
        history.close()
    if freeze_at >= cfg.total_iters and not is_frozen(model):
        freeze_bn(model)
        history.append({"step": cfg.total_iters, "event": "bn_freeze"})
    return model, history
