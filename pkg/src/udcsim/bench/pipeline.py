"""Shared building blocks for the experiment runners: corpora, splits, degraders, restorer training."""
from __future__ import annotations

import os

import numpy as np
import torch
import torch.nn as nn

from ..config import DataConfig
from ..dwformer import RestorerConfig, freeze_bn
from ..errors import ConfigError
from ..imaging import Image, fit_landscape, load_image
from ..rng import RngStream
from ..scenes import scene_corpus
from ..sgm import SgmConfig, convolve_psf, quantize, sgm_degrade
from ..training import PairSet, RestoreTrainConfig, train_restorer

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def list_images(directory) -> list:
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"{directory}: not a directory")
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(IMAGE_SUFFIXES))
    return [os.path.join(directory, n) for n in names]


def build_corpus(data: DataConfig, rng: RngStream) -> list:
    """Clean images: procedural scenes, or files from ``data.clean_dir`` fitted to the configured size."""
    if data.clean_dir is None:
        return scene_corpus(data.n_images, data.height, data.width, rng.split("scenes"))
    paths = list_images(data.clean_dir)[: data.n_images]
    if not paths:
        raise ConfigError(f"{data.clean_dir}: no images found")
    return [fit_landscape(load_image(p), data.height, data.width) for p in paths]


def split_indices(n: int, fractions, rng: RngStream):
    """Seeded shuffle, then consecutive train / validation / test slices."""
    order = rng.split("split").numpy.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def oracle_pairs(cleans, sgm_cfg: SgmConfig, rng: RngStream, label: str = "oracle") -> list:
    return [sgm_degrade(c, sgm_cfg, rng.split(f"{label}/{i}")) for i, c in enumerate(cleans)]


class OracleDegrader(nn.Module):
    """The closed-form degradation wrapped with the generator's call signature."""

    def __init__(self, cfg: SgmConfig):
        super().__init__()
        self.sgm = cfg

    def blur(self, x):
        out = [convolve_psf(Image(img.permute(1, 2, 0).double().numpy()), self.sgm.psf).data for img in x]
        return torch.from_numpy(np.stack(out).transpose(0, 3, 1, 2)).to(x.dtype)

    def forward(self, x, rng: RngStream):
        out = [sgm_degrade(Image(img.permute(1, 2, 0).double().numpy()), self.sgm, rng.split(str(b))).data
               for b, img in enumerate(x)]
        return torch.from_numpy(np.stack(out).transpose(0, 3, 1, 2)).to(x.dtype)


def as_stored(t: torch.Tensor, bits: int = 8) -> Image:
    """What a generated image looks like once written to disk: clamped and quantized."""
    arr = t.detach().permute(1, 2, 0).double().numpy()
    return quantize(Image(arr), bits)


@torch.no_grad()
def generated_pairs(cleans, degrader: nn.Module, rng: RngStream, label: str = "generated", bits: int = 8) -> list:
    was_training = degrader.training
    degrader.eval()
    out = []
    for i, c in enumerate(cleans):
        x = torch.from_numpy(c.data.transpose(2, 0, 1)[None]).float()
        out.append(as_stored(degrader(x, rng.split(f"{label}/{i}"))[0], bits))
    degrader.train(was_training)
    return out


def fit_restorer(clean, degraded, model_cfg: RestorerConfig, sched: RestoreTrainConfig, rng: RngStream,
                 history_path=None):
    """Train a restorer on aligned lists of images; returns ``(model, history)`` with norms frozen."""
    model, history = train_restorer(PairSet.from_images(clean, degraded), sched, rng, model_cfg=model_cfg,
                                    history_path=history_path)
    freeze_bn(model)
    model.eval()
    return model, history
