"""Pixel-wise U-Net discriminator over (clean, degraded) pairs."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError
from .generator import seeded_init
from .rng import RngStream


@dataclass
class DiscriminatorConfig:
    widths: tuple = (32, 64, 128)

    def validate(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ConfigError("discriminator.widths needs three positive entries")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown discriminator keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self):
        return {"widths": list(self.widths)}


def _block(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.LeakyReLU(0.2))


class UNetDiscriminator(nn.Module):
    """Input: clean and degraded concatenated on channels (clean first). Output: N x 1 x H x W in (0, 1)."""

    def __init__(self, cfg: Optional[DiscriminatorConfig] = None):
        super().__init__()
        self.cfg = (cfg or DiscriminatorConfig()).validate()
        w1, w2, w3 = self.cfg.widths
        self.enc1 = nn.Sequential(_block(6, w1), _block(w1, w1))
        self.enc2 = nn.Sequential(_block(w1, w2, 2), _block(w2, w2))
        self.enc3 = nn.Sequential(_block(w2, w3, 2), _block(w3, w3))
        self.bottom = nn.Sequential(_block(w3, w3, 2), _block(w3, w3))
        self.up3 = _block(w3, w3)
        self.dec3 = _block(2 * w3, w3)
        self.up2 = _block(w3, w2)
        self.dec2 = _block(2 * w2, w2)
        self.up1 = _block(w2, w1)
        self.dec1 = _block(2 * w1, w1)
        self.out = nn.Conv2d(w1, 1, 1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, a=0.2)
                nn.init.zeros_(m.bias)
        # zero-sum first-layer filters: image content no longer swamps the pre-activations,
        # so noise gets rectified from the start and the noise level is visible to the loss
        with torch.no_grad():
            first = self.enc1[0][0].weight
            first -= first.mean(dim=(2, 3), keepdim=True)

    @staticmethod
    def _up(x):
        return F.interpolate(x, scale_factor=2, mode="nearest")

    def logits(self, clean, degraded):
        if clean.shape != degraded.shape:
            raise DimensionError(f"clean {tuple(clean.shape)} vs degraded {tuple(degraded.shape)}")
        h, w = clean.shape[-2:]
        if h % 8 or w % 8:
            raise DimensionError(f"discriminator needs H, W divisible by 8, got {h}x{w}")
        # inputs live in [0, 1]; centering them keeps small noise residuals away from the bias scale
        e1 = self.enc1(torch.cat([clean, degraded], dim=1) * 2.0 - 1.0)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        b = self.bottom(e3)
        d3 = self.dec3(torch.cat([self.up3(self._up(b)), e3], dim=1))
        d2 = self.dec2(torch.cat([self.up2(self._up(d3)), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(self._up(d2)), e1], dim=1))
        return self.out(d1)

    def forward(self, clean, degraded):
        return torch.sigmoid(self.logits(clean, degraded))


def discriminate(clean, degraded, model: UNetDiscriminator):
    """Per-pixel realness map, returned channels-last as (batch, H, W, 1)."""
    return model(clean, degraded).permute(0, 2, 3, 1)


def init_discriminator(cfg: Optional[DiscriminatorConfig], rng: RngStream) -> UNetDiscriminator:
    return seeded_init(lambda: UNetDiscriminator(cfg), rng.split("discriminator-init"))
