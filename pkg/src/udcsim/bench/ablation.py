"""Ablation specs, constructive module swaps, and the ablation runner."""
from __future__ import annotations

import contextlib
import copy
import re
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..dwformer import DWFormer, init_restorer
from ..errors import ConfigError
from ..generator import MPGNet, init_generator
from ..rng import RngStream
from ..sgm import SgmConfig
from ..training import LOSS_TERMS

GENERATOR_VARIANTS = ("full", "sgm-light", "sgm-blur", "sgm-noise", "no-nq", "no-nd", "no-ni")
RESTORER_VARIANTS = ("full", "no-aca", "se-attention", "layer-norm")
TARGETS = {"generator": GENERATOR_VARIANTS, "restorer": RESTORER_VARIANTS}

# parameter-name patterns each swap may touch; everything else must be untouched
SWAPPED_SUBTREES = {
    "full": None,
    "sgm-light": r"^brightness\.",
    "sgm-blur": r"^blur\.",
    "sgm-noise": r"^noise\.",
    "no-nq": r"^noise\.quant\.",
    "no-nd": r"^noise\.dependent\.",
    "no-ni": r"^noise\.independent\.",
    "no-aca": r"\.aca\.",
    "se-attention": r"\.aca\.",
    "layer-norm": r"\.norm[12]\.",
}

# the generator submodule whose output a "no-*" variant removes
ZEROED_BRANCH = {"no-nq": "noise.quant.proj", "no-nd": "noise.dependent.transform",
                 "no-ni": "noise.independent"}


@dataclass(frozen=True)
class AblationSpec:
    target: str = "generator"
    variant: str = "full"
    losses: tuple = ("adv", "sup")
    lam: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "losses", tuple(self.losses))
        object.__setattr__(self, "lam", float(self.lam))
        if self.target not in TARGETS:
            raise ConfigError(f"unknown ablation target {self.target!r}")
        if self.variant not in TARGETS[self.target]:
            raise ConfigError(f"unknown {self.target} variant {self.variant!r}; choose from {TARGETS[self.target]}")
        if not self.losses or set(self.losses) - set(LOSS_TERMS) or len(set(self.losses)) != len(self.losses):
            raise ConfigError(f"losses must be distinct members of {LOSS_TERMS}")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")

    def __str__(self):
        return f"{self.target}/{self.variant}/{'+'.join(self.losses)}/lam={self.lam!r}"

    @classmethod
    def parse(cls, text: str) -> "AblationSpec":
        m = re.fullmatch(r"(\w+)/([\w-]+)(?:/([\w+-]+))?(?:/lam=([^/]+))?", text.strip())
        if not m:
            raise ConfigError(f"cannot parse ablation spec {text!r}")
        target, variant, losses, lam = m.groups()
        kw = {"target": target, "variant": variant}
        if losses:
            kw["losses"] = tuple(losses.split("+"))
        if lam is not None:
            try:
                kw["lam"] = float(lam)
            except ValueError as e:
                raise ConfigError(f"bad lambda in {text!r}") from e
        return cls(**kw)


# ---------------------------------------------------------------------------
# fixed-form replacements for generator stages
# ---------------------------------------------------------------------------


class FixedGain(nn.Module):
    def __init__(self, gamma):
        super().__init__()
        self.register_buffer("gamma", torch.tensor(gamma, dtype=torch.float32))

    def forward(self, x):
        return x * self.gamma.to(x.dtype)[None, :, None, None]


class FixedPsfBlur(nn.Module):
    """Per-channel convolution with a fixed kernel, reflect-padded (same border rule as the oracle)."""

    def __init__(self, psf):
        super().__init__()
        k = torch.as_tensor(psf, dtype=torch.float32).flip(0, 1)  # conv2d correlates; flip for convolution
        self.register_buffer("kernel", k[None, None].repeat(3, 1, 1, 1))

    def forward(self, x):
        r = self.kernel.shape[-1] // 2
        return F.conv2d(F.pad(x, (r, r, r, r), mode="reflect"), self.kernel.to(x.dtype), groups=3)


class StatisticalNoise(nn.Module):
    """Heteroscedastic Gaussian noise plus rounding; rounding passes gradients straight through."""

    def __init__(self, sigma_read: float, sigma_shot: float, bit_depth=8):
        super().__init__()
        self.sigma_read = float(sigma_read)
        self.sigma_shot = float(sigma_shot)
        self.bit_depth = bit_depth

    def forward(self, x_blur, rng: RngStream = None, samples=None, trace=None):
        if samples is not None:
            z = samples.n_s1[:, :3]
        else:
            if rng is None:
                raise ValueError("noise module needs an rng or explicit samples")
            z = torch.randn(x_blur.shape, generator=rng.split("n_s1").torch_generator(), dtype=x_blur.dtype)
        y = x_blur + z * torch.sqrt(self.sigma_read**2 + self.sigma_shot * x_blur.clamp_min(0.0))
        if self.bit_depth is None:
            return y
        peak = 2 ** int(self.bit_depth) - 1
        q = torch.floor(y.clamp(0.0, 1.0) * peak + 0.5) / peak
        return y + (q - y).detach()


def apply_generator_variant(model: MPGNet, variant: str, sgm_cfg: SgmConfig = None) -> MPGNet:
    """Swap exactly one component in place and return the model."""
    if variant not in GENERATOR_VARIANTS:
        raise ConfigError(f"unknown generator variant {variant!r}")
    if variant.startswith("sgm-") and sgm_cfg is None:
        raise ConfigError(f"variant {variant} needs the closed-form degradation parameters")
    if variant == "sgm-light":
        model.brightness = FixedGain(sgm_cfg.gamma)
    elif variant == "sgm-blur":
        model.blur = FixedPsfBlur(sgm_cfg.psf)
    elif variant == "sgm-noise":
        model.noise = StatisticalNoise(sgm_cfg.sigma_read, sgm_cfg.sigma_shot, sgm_cfg.bit_depth)
    elif variant == "no-nq":
        model.noise.quant = None
    elif variant == "no-nd":
        model.noise.dependent = None
    elif variant == "no-ni":
        model.noise.independent = None
    return model


def build_generator_variant(spec: AblationSpec, gen_cfg, sgm_cfg: SgmConfig, rng: RngStream) -> MPGNet:
    """Initialize the full generator from ``rng`` and apply the swap, so shared parts match the full init."""
    return apply_generator_variant(init_generator(gen_cfg, rng), spec.variant, sgm_cfg)


def restorer_variant_config(base_cfg, variant: str):
    if variant not in RESTORER_VARIANTS:
        raise ConfigError(f"unknown restorer variant {variant!r}")
    cfg = copy.deepcopy(base_cfg)
    if variant == "no-aca":
        cfg.attention = "none"
    elif variant == "se-attention":
        cfg.attention = "se"
    elif variant == "layer-norm":
        cfg.norm = "ln"
    return cfg.validate()


def build_restorer_variant(spec: AblationSpec, base_cfg, rng: RngStream) -> DWFormer:
    return init_restorer(restorer_variant_config(base_cfg, spec.variant), rng)


@contextlib.contextmanager
def zeroed_branch(model: MPGNet, variant: str):
    """Temporarily force one noise branch of a full generator to output zeros."""
    if variant not in ZEROED_BRANCH:
        raise ConfigError(f"variant {variant!r} does not remove a noise branch")
    module = model.get_submodule(ZEROED_BRANCH[variant])
    handle = module.register_forward_hook(lambda m, inp, out: torch.zeros_like(out))
    try:
        yield model
    finally:
        handle.remove()


def swapped_names(diff_names, variant: str) -> bool:
    """True when every differing parameter name lies inside the variant's swapped subtree."""
    pattern = SWAPPED_SUBTREES[variant]
    if pattern is None:
        return not diff_names
    return bool(diff_names) and all(re.search(pattern, n) for n in diff_names)
