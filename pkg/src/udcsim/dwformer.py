"""DWFormer restoration network.

Each block is ``z' = P2(ACA(relu(DW(P1(BN(z)))))) + z`` followed by
``MLP(BN(z')) + z'``; the network predicts a residual image added to its input.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, StateError
from .generator import seeded_init
from .rng import RngStream

NORM_MODES = ("minibatch", "frozen")


class DualModeBatchNorm2d(nn.BatchNorm2d):
    """Batch norm with an explicit mode instead of train/eval coupling.

    ``minibatch``: normalize with batch statistics; running averages update
    while the module is in training mode. ``frozen``: normalize with the stored
    running averages and never update them.
    """

    def __init__(self, num_features, eps=1e-5, momentum=0.1):
        super().__init__(num_features, eps=eps, momentum=momentum)
        self.frozen = False

    def get_extra_state(self):
        return {"frozen": self.frozen}

    def set_extra_state(self, state):
        self.frozen = bool(state["frozen"])

    @property
    def has_statistics(self) -> bool:
        return int(self.num_batches_tracked) > 0

    def set_mode(self, mode: str):
        if mode not in NORM_MODES:
            raise ValueError(f"unknown norm mode {mode!r}")
        if mode == "frozen" and not self.has_statistics:
            raise StateError("frozen mode requested before any population statistics were accumulated")
        self.frozen = mode == "frozen"

    def forward(self, x):
        if self.frozen:
            return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                                False, 0.0, self.eps)
        track = self.training
        if track:
            self.num_batches_tracked.add_(1)
        return F.batch_norm(
            x,
            self.running_mean if track else None,
            self.running_var if track else None,
            self.weight, self.bias, True, self.momentum, self.eps,
        )


class LayerNorm2d(nn.Module):
    """Per-pixel normalization over channels."""

    def __init__(self, num_features, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class ACA(nn.Module):
    """Softmax-weighted spatial pooling into a channel descriptor, then a sigmoid gate.

    The excitation pair acts on the pooled 1x1 descriptor, so it is written with
    linear layers (identical to pixel-wise convolutions on a 1x1 map).
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.position = nn.Conv2d(channels, 1, 1)
        self.reduce = nn.Linear(channels, hidden)
        self.expand = nn.Linear(hidden, channels)

    def position_weights(self, x):
        b = x.shape[0]
        return torch.softmax(self.position(x).reshape(b, 1, -1), dim=-1)

    def descriptor(self, x):
        b, c = x.shape[:2]
        w = self.position_weights(x)  # b x 1 x HW
        return torch.bmm(w, x.reshape(b, c, -1).transpose(1, 2)).reshape(b, c)

    def gate(self, x):
        return torch.sigmoid(self.expand(F.relu(self.reduce(self.descriptor(x)))))

    def forward(self, x):
        if x.shape[1] != self.position.in_channels:
            raise DimensionError(f"ACA built for {self.position.in_channels} channels, got {x.shape[1]}")
        return x * self.gate(x)[:, :, None, None]


class SqueezeExcitation(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.reduce = nn.Linear(channels, hidden)
        self.expand = nn.Linear(hidden, channels)

    def forward(self, x):
        s = torch.sigmoid(self.expand(F.relu(self.reduce(x.mean(dim=(2, 3))))))
        return x * s[:, :, None, None]


def make_norm(kind: str, c: int, eps: float, momentum: float) -> nn.Module:
    if kind == "bn":
        return DualModeBatchNorm2d(c, eps=eps, momentum=momentum)
    if kind == "ln":
        return LayerNorm2d(c)
    raise ConfigError(f"unknown norm {kind!r}")


def make_attention(kind: str, c: int, reduction: int) -> nn.Module:
    if kind == "aca":
        return ACA(c, reduction)
    if kind == "se":
        return SqueezeExcitation(c, reduction)
    if kind == "none":
        return nn.Identity()
    raise ConfigError(f"unknown attention {kind!r}")


class DWBlock(nn.Module):
    def __init__(self, c: int, expansion: int = 2, reduction: int = 4, attention: str = "aca",
                 norm: str = "bn", bn_eps: float = 1e-5, bn_momentum: float = 0.1):
        super().__init__()
        self.norm1 = make_norm(norm, c, bn_eps, bn_momentum)
        self.proj_in = nn.Conv2d(c, c, 1)
        self.dwconv = nn.Conv2d(c, c, 3, padding=1, groups=c)
        self.aca = make_attention(attention, c, reduction)
        self.proj_out = nn.Conv2d(c, c, 1)
        self.norm2 = make_norm(norm, c, bn_eps, bn_momentum)
        self.mlp = nn.Sequential(nn.Conv2d(c, c * expansion, 1), nn.GELU(), nn.Conv2d(c * expansion, c, 1))

    def forward(self, z):
        if z.shape[1] != self.proj_in.in_channels:
            raise DimensionError(f"block expects {self.proj_in.in_channels} channels, got {z.shape[1]}")
        z_hat = self.proj_out(self.aca(F.relu(self.dwconv(self.proj_in(self.norm1(z)))))) + z
        return self.mlp(self.norm2(z_hat)) + z_hat


@dataclass
class RestorerConfig:
    widths: tuple = (32, 64, 112, 64, 32)
    blocks: tuple = (8, 8, 8, 6, 6)
    mlp_expansion: int = 2
    aca_reduction: int = 4
    attention: str = "aca"
    norm: str = "bn"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def validate(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.blocks = tuple(int(b) for b in self.blocks)
        if len(self.widths) != 5 or len(self.blocks) != 5:
            raise ConfigError("restorer needs exactly five stages")
        if min(self.widths) < 1 or min(self.blocks) < 0:
            raise ConfigError("restorer widths must be positive and block counts non-negative")
        if self.widths[3] != self.widths[1] or self.widths[4] != self.widths[0]:
            raise ConfigError("decoder widths must mirror the encoder for additive skips")
        if self.attention not in ("aca", "se", "none") or self.norm not in ("bn", "ln"):
            raise ConfigError(f"bad attention/norm choice {self.attention}/{self.norm}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RestorerConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown restorer keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self):
        d = asdict(self)
        d["widths"], d["blocks"] = list(self.widths), list(self.blocks)
        return d


class DWFormer(nn.Module):
    def __init__(self, cfg: Optional[RestorerConfig] = None):
        super().__init__()
        self.cfg = cfg = (cfg or RestorerConfig()).validate()
        w, n = cfg.widths, cfg.blocks

        def stage(i):
            return nn.Sequential(*[
                DWBlock(w[i], cfg.mlp_expansion, cfg.aca_reduction, cfg.attention, cfg.norm,
                        cfg.bn_eps, cfg.bn_momentum)
                for _ in range(n[i])
            ])

        self.stem = nn.Conv2d(3, w[0], 3, padding=1)
        self.stage1 = stage(0)
        self.down1 = nn.Conv2d(w[0], w[1], 2, stride=2)
        self.stage2 = stage(1)
        self.down2 = nn.Conv2d(w[1], w[2], 2, stride=2)
        self.stage3 = stage(2)
        self.up1 = nn.Sequential(nn.Conv2d(w[2], w[3] * 4, 1), nn.PixelShuffle(2))
        self.stage4 = stage(3)
        self.up2 = nn.Sequential(nn.Conv2d(w[3], w[4] * 4, 1), nn.PixelShuffle(2))
        self.stage5 = stage(4)
        self.head = nn.Conv2d(w[4], 3, 3, padding=1)

    def residual(self, y):
        h, w = y.shape[-2:]
        if h % 4 or w % 4:
            raise DimensionError(f"restorer needs H, W divisible by 4, got {h}x{w}")
        s1 = self.stage1(self.stem(y))
        s2 = self.stage2(self.down1(s1))
        s3 = self.stage3(self.down2(s2))
        d = self.stage4(self.up1(s3) + s2)
        d = self.stage5(self.up2(d) + s1)
        return self.head(d)

    def forward(self, y):
        return y + self.residual(y)


def init_restorer(cfg: Optional[RestorerConfig], rng: RngStream) -> DWFormer:
    return seeded_init(lambda: DWFormer(cfg), rng.split("restorer-init"))


def batch_norms(module: nn.Module) -> list:
    return [m for m in module.modules() if isinstance(m, DualModeBatchNorm2d)]


def set_norm_mode(module: nn.Module, mode: str) -> nn.Module:
    norms = batch_norms(module)
    if mode == "frozen":
        missing = [m for m in norms if not m.has_statistics]
        if missing:
            raise StateError(f"{len(missing)} norm layers have no accumulated statistics")
    for m in norms:
        m.set_mode(mode)
    return module


def is_frozen(module: nn.Module) -> bool:
    """True when every batch norm uses stored statistics (vacuously true without any)."""
    return all(m.frozen for m in batch_norms(module))


def freeze_bn(model: nn.Module) -> nn.Module:
    """Switch every batch norm to stored population statistics. Idempotent."""
    return set_norm_mode(model, "frozen")


def dwb_forward(z, block: DWBlock, mode: str):
    set_norm_mode(block, mode)
    return block(z)


def aca_forward(f_in, module: ACA):
    return module(f_in)


def restore(y, model: DWFormer, mode: Optional[str] = None):
    if mode is not None:
        set_norm_mode(model, mode)
    return model(y)
