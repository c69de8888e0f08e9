"""Restoration quality reports."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..checkpoint import state_checksum
from ..dwformer import is_frozen
from ..errors import IntegrityError, StateError
from ..imaging import Image, psnr, ssim
from ..overhead import count_macs, count_params
from .dataset import DatasetManifest

MACS_RESOLUTION = 256


@dataclass
class EvalReport:
    per_image: list = field(default_factory=list)  # {"name", "psnr", "ssim"}
    psnr: float = float("nan")
    ssim: float = float("nan")
    params: Optional[int] = None
    macs: Optional[int] = None
    macs_resolution: int = MACS_RESOLUTION
    config_hash: Optional[str] = None
    seed: Optional[int] = None
    tag: Optional[str] = None

    def aggregate(self):
        self.psnr = float(np.mean([r["psnr"] for r in self.per_image]))
        self.ssim = float(np.mean([r["ssim"] for r in self.per_image]))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


@torch.no_grad()
def restore_image(model: nn.Module, img: Image, multiple: int = 4) -> Image:
    """Restore one image, reflect-padding to a size the network accepts; result clamped to [0, 1]."""
    x = torch.from_numpy(img.data.transpose(2, 0, 1)[None]).float()
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    y = model(x)[..., :h, :w].clamp(0.0, 1.0)
    return Image(y[0].permute(1, 2, 0).double().numpy())


def _overhead(model):
    params = count_params(model)
    try:
        macs = count_macs(model, MACS_RESOLUTION)
    except Exception:  # stubs that only accept their own inputs
        macs = None
    return params, macs


def evaluate_images(model: nn.Module, clean, degraded, names=None, config_hash=None, seed=None,
                    tag=None) -> EvalReport:
    if not is_frozen(model):
        raise StateError("evaluation needs a restorer in frozen-norm mode")
    was_training = model.training
    model.eval()
    names = names or [f"{i:04d}" for i in range(len(clean))]
    rep = EvalReport(config_hash=config_hash, seed=seed, tag=tag)
    for name, c, d in zip(names, clean, degraded):
        out = restore_image(model, d)
        rep.per_image.append({"name": name, "psnr": psnr(out, c), "ssim": ssim(out, c)})
    model.train(was_training)
    rep.params, rep.macs = _overhead(model)
    return rep.aggregate()


def evaluate(model: nn.Module, manifest: DatasetManifest, config_hash=None, seed=None, tag=None) -> EvalReport:
    """Verify the manifest digests, restore every degraded image, score it against its clean partner."""
    manifest.verify()
    before = state_checksum(model)
    pairs = [manifest.load_pair(e) for e in manifest.entries]
    names = [e["name"] for e in manifest.entries]
    if config_hash is None and manifest.entries:
        config_hash = manifest.entries[0]["config_hash"]
    if seed is None and manifest.entries:
        seed = manifest.entries[0]["seed"]
    rep = evaluate_images(model, [p[0] for p in pairs], [p[1] for p in pairs], names, config_hash, seed, tag)
    if state_checksum(model) != before:
        raise IntegrityError("restorer parameters changed during evaluation")
    return rep
