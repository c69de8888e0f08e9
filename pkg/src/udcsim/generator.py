"""Modular degradation generator: brightness attenuation -> blurring -> noise corruption.

All modules work on N x 3 x H x W tensors. Values are never clamped here;
clamping happens only when images are written to disk.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError
from .rng import RngStream

NOISE_STREAMS = ("n_s1", "n_s2", "n_s3")


@dataclass
class GeneratorConfig:
    brightness_width: int = 16
    brightness_expansion: int = 4
    blur_width: int = 32
    blur_blocks: int = 2
    noise_dim: int = 32
    pad_to_multiple: bool = False

    def validate(self):
        for k in ("brightness_width", "brightness_expansion", "blur_width", "noise_dim"):
            if getattr(self, k) < 1:
                raise ConfigError(f"generator.{k} must be positive")
        if self.blur_blocks < 0:
            raise ConfigError("generator.blur_blocks must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


def conv1x1(cin, cout):
    return nn.Conv2d(cin, cout, 1)


def zero_(layer: nn.Module) -> nn.Module:
    for p in layer.parameters():
        nn.init.zeros_(p)
    return layer


# ---------------------------------------------------------------------------
# brightness
# ---------------------------------------------------------------------------


class BrightnessAttenuation(nn.Module):
    """Per-image, per-channel gain in (0, 1) predicted from pooled features."""

    def __init__(self, width: int = 16, expansion: int = 4):
        super().__init__()
        self.features = nn.Sequential(conv3x3(3, width), nn.ReLU(), conv3x3(width, width), nn.ReLU())
        self.up = nn.Linear(width, width * expansion)
        self.down = nn.Linear(width * expansion, 3)

    def logits(self, x):
        pooled = self.features(x).mean(dim=(2, 3))
        return self.down(F.relu(self.up(pooled)))

    def gains(self, x):
        return torch.sigmoid(self.logits(x))

    def forward(self, x):
        return x * self.gains(x)[:, :, None, None]


# ---------------------------------------------------------------------------
# blur
# ---------------------------------------------------------------------------


class ResBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.conv1 = conv3x3(width, width)
        self.conv2 = conv3x3(width, width)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class Blurring(nn.Module):
    """Two-scale encoder-decoder residual network; output = net(x) + x.

    Stride-2 convolutions downsample, sub-pixel convolutions upsample, and
    encoder features are added back at matching scales.
    """

    def __init__(self, width: int = 32, blocks: int = 2, pad_to_multiple: bool = False):
        super().__init__()
        self.pad_to_multiple = pad_to_multiple

        def stack():
            return nn.Sequential(*[ResBlock(width) for _ in range(blocks)])

        self.head = conv3x3(3, width)
        self.enc0 = stack()
        self.down1 = conv3x3(width, width, stride=2)
        self.enc1 = stack()
        self.down2 = conv3x3(width, width, stride=2)
        self.mid = stack()
        self.up2 = nn.Sequential(conv3x3(width, width * 4), nn.PixelShuffle(2))
        self.dec1 = stack()
        self.up1 = nn.Sequential(conv3x3(width, width * 4), nn.PixelShuffle(2))
        self.dec0 = stack()
        self.tail = zero_(conv3x3(width, 3))

    def residual(self, x):
        f0 = self.enc0(self.head(x))
        f1 = self.enc1(self.down1(F.relu(f0)))
        f2 = self.mid(self.down2(F.relu(f1)))
        g1 = self.dec1(self.up2(f2) + f1)
        g0 = self.dec0(self.up1(g1) + f0)
        return self.tail(F.relu(g0))

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            if not self.pad_to_multiple:
                raise DimensionError(f"blur module needs H, W divisible by 4, got {h}x{w}")
            ph, pw = (-h) % 4, (-w) % 4
            xp = F.pad(x, (0, pw, 0, ph), mode="reflect")
            return (self.residual(xp) + xp)[..., :h, :w]
        return self.residual(x) + x


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------


class ResidualTransform(nn.Module):
    """Pixel-wise conv -> 3x3 conv -> pixel-wise conv, with an identity skip."""

    def __init__(self, dim: int):
        super().__init__()
        self.pw1 = conv1x1(dim, dim)
        self.conv = conv3x3(dim, dim)
        self.pw2 = conv1x1(dim, dim)

    def forward(self, x):
        h = F.leaky_relu(self.pw1(x), 0.2)
        h = F.leaky_relu(self.conv(h), 0.2)
        return x + self.pw2(h)


class MeanScaleEncoder(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv = conv3x3(3, dim)
        self.proj = conv1x1(dim, 2 * dim)

    def forward(self, x):
        mu, s = self.proj(F.leaky_relu(self.conv(x), 0.2)).chunk(2, dim=1)
        return mu, F.softplus(s)


class IntervalEncoder(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv = conv3x3(3, dim)
        self.proj = conv1x1(dim, dim)

    def forward(self, x):
        return F.softplus(self.proj(F.leaky_relu(self.conv(x), 0.2)))


class SignalDependentBranch(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.encoder = MeanScaleEncoder(dim)
        self.transform = ResidualTransform(dim)


class QuantizationBranch(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.encoder = IntervalEncoder(dim)
        self.transform = ResidualTransform(dim)
        self.proj = zero_(conv1x1(dim, 3))


@dataclass
class NoiseSamples:
    """Base draws for one noise forward: two standard normals and one U(-1, 1)."""

    n_s1: torch.Tensor
    n_s2: torch.Tensor
    u: torch.Tensor

    @classmethod
    def draw(cls, shape, rng: RngStream, dtype=torch.float32) -> "NoiseSamples":
        return cls(
            torch.randn(shape, generator=rng.split("n_s1").torch_generator(), dtype=dtype),
            torch.randn(shape, generator=rng.split("n_s2").torch_generator(), dtype=dtype),
            torch.rand(shape, generator=rng.split("n_s3").torch_generator(), dtype=dtype) * 2 - 1,
        )

    @classmethod
    def zeros(cls, shape, dtype=torch.float32) -> "NoiseSamples":
        z = torch.zeros(shape, dtype=dtype)
        return cls(z, z.clone(), z.clone())


class NoiseCorruption(nn.Module):
    """Signal-independent, signal-dependent and quantization noise, each transformed by a residual block.

    Branch submodules may be removed (set to ``None``) to ablate them; the
    remaining branches still read the same labeled random substreams.
    """

    def __init__(self, dim: int = 32):
        super().__init__()
        self.dim = dim
        self.independent = ResidualTransform(dim)
        self.dependent = SignalDependentBranch(dim)
        self.mix = zero_(conv1x1(dim, 3))
        self.quant = QuantizationBranch(dim)

    def forward(self, x_blur, rng: Optional[RngStream] = None, samples: Optional[NoiseSamples] = None,
                trace: Optional[dict] = None):
        b, _, h, w = x_blur.shape
        if samples is None:
            if rng is None:
                raise ValueError("noise module needs an rng or explicit samples")
            samples = NoiseSamples.draw((b, self.dim, h, w), rng, dtype=x_blur.dtype)
        noise = torch.zeros((), dtype=x_blur.dtype)
        if self.independent is not None:
            n_i = self.independent(samples.n_s1)
            noise = noise + n_i
        if self.dependent is not None:
            mu, sigma = self.dependent.encoder(x_blur)
            latent = samples.n_s2 * sigma + mu
            n_d = self.dependent.transform(latent)
            noise = noise + n_d
            if trace is not None:
                trace.update(mu=mu, sigma=sigma, latent=latent)
        x_noisy = x_blur + self.mix(noise) if noise.dim() else x_blur
        if trace is not None:
            trace["x_noisy"] = x_noisy
        if self.quant is None:
            return x_noisy
        q = self.quant.encoder(x_noisy)
        n_q = self.quant.transform(samples.u * q)
        if trace is not None:
            trace["q"] = q
        return self.quant.proj(n_q) + x_noisy


# ---------------------------------------------------------------------------
# full generator
# ---------------------------------------------------------------------------


class MPGNet(nn.Module):
    def __init__(self, cfg: Optional[GeneratorConfig] = None):
        super().__init__()
        self.cfg = (cfg or GeneratorConfig()).validate()
        self.brightness = BrightnessAttenuation(self.cfg.brightness_width, self.cfg.brightness_expansion)
        self.blur = Blurring(self.cfg.blur_width, self.cfg.blur_blocks, self.cfg.pad_to_multiple)
        self.noise = NoiseCorruption(self.cfg.noise_dim)

    def forward(self, x, rng: Optional[RngStream] = None, samples: Optional[NoiseSamples] = None):
        return self.stages(x, rng, samples)["x_final"]

    def stages(self, x, rng=None, samples=None) -> dict:
        if x.dim() != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected N x 3 x H x W batch, got {tuple(x.shape)}")
        x_dark = self.brightness(x)
        x_blur = self.blur(x_dark)
        x_final = self.noise(x_blur, rng, samples)
        return {"x_clean": x, "x_dark": x_dark, "x_blur": x_blur, "x_final": x_final}


def brightness_forward(x, module: BrightnessAttenuation):
    return module(x)


def blur_forward(x, module: Blurring):
    return module(x)


def noise_forward(x, module: NoiseCorruption, rng: RngStream):
    return module(x, rng)


def generate(x, model: MPGNet, rng: RngStream):
    return model(x, rng)


def seeded_init(factory, rng: RngStream):
    """Build a module with torch's default fan-in init, seeded from ``rng`` without touching global state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng.derived_seed())
        return factory()


def init_generator(cfg: Optional[GeneratorConfig], rng: RngStream) -> MPGNet:
    """Random init with the injection layers (blur tail, noise mix, quantization proj) at zero."""
    cfg = (cfg or GeneratorConfig()).validate()
    return seeded_init(lambda: MPGNet(cfg), rng.split("generator-init"))


def injection_layers(model: MPGNet) -> dict:
    out = {"blur.tail": model.blur.tail}
    if isinstance(model.noise, NoiseCorruption):
        out["noise.mix"] = model.noise.mix
        if model.noise.quant is not None:
            out["noise.quant.proj"] = model.noise.quant.proj
    return out
