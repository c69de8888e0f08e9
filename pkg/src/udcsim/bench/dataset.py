"""On-disk paired datasets with a line-delimited JSON manifest.

Layout under ``out_dir``::

    clean/<stem>.png       copy of the source image at its source bit depth
    degraded/<stem>.png    8-bit degraded partner
    manifest.jsonl         one record per pair

Each record holds ``index``, ``name``, ``clean_path`` and ``degraded_path``
(relative to the manifest directory), their ``sha256`` digests, the ``seed``,
the ``rng_path`` label of the draw, the degrader ``config_hash`` and its kind.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from ..errors import ConfigError, IntegrityError
from ..imaging import Image, load_image, save_image
from ..rng import RngStream
from ..sgm import SgmConfig, sgm_degrade
from .pipeline import as_stored, list_images

MANIFEST_NAME = "manifest.jsonl"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class DatasetManifest:
    root: str
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def path(self) -> str:
        return os.path.join(self.root, MANIFEST_NAME)

    def write(self):
        with open(self.path, "w") as f:
            for e in self.entries:
                f.write(json.dumps(e, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = os.fspath(path)
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_NAME)
        with open(path) as f:
            entries = [json.loads(line) for line in f if line.strip()]
        return cls(os.path.dirname(os.path.abspath(path)), entries)

    def resolve(self, rel) -> str:
        return rel if os.path.isabs(rel) else os.path.join(self.root, rel)

    def verify(self):
        """Raise :class:`IntegrityError` when a listed file is missing or its digest differs."""
        for e in self.entries:
            for key in ("clean", "degraded"):
                p = self.resolve(e[f"{key}_path"])
                if not os.path.exists(p):
                    raise IntegrityError(f"manifest entry {e['index']}: missing {key} file {p}")
                if sha256_file(p) != e[f"{key}_sha256"]:
                    raise IntegrityError(f"manifest entry {e['index']}: {key} file {p} does not match its digest")

    def load_pair(self, e):
        return load_image(self.resolve(e["clean_path"])), load_image(self.resolve(e["degraded_path"]))


def degrader_hash(degrader) -> str:
    if isinstance(degrader, SgmConfig):
        return degrader.config_hash()
    from ..checkpoint import state_checksum

    return state_checksum(degrader)[:16]


def degrade_one(img: Image, degrader, rng: RngStream) -> Image:
    if isinstance(degrader, SgmConfig):
        return sgm_degrade(img, degrader, rng)
    if isinstance(degrader, nn.Module):
        x = torch.from_numpy(img.data.transpose(2, 0, 1)[None]).float()
        with torch.no_grad():
            return as_stored(degrader(x, rng)[0])
    raise ConfigError(f"unsupported degrader {type(degrader).__name__}")


def synthesize_dataset(clean_dir, degrader, out_dir, rng: RngStream) -> DatasetManifest:
    """Write one 8-bit degraded partner per clean image plus a manifest.

    ``degrader`` is an :class:`SgmConfig` or a generator module called as
    ``degrader(x, rng)``. Pair ``i`` draws from the substream ``pair/<i>``.
    """
    paths = list_images(clean_dir)
    if not paths:
        raise ConfigError(f"{clean_dir}: no clean images")
    if isinstance(degrader, nn.Module):
        degrader.eval()
    for sub in ("clean", "degraded"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    chash = degrader_hash(degrader)
    kind = "sgm" if isinstance(degrader, SgmConfig) else "generator"
    manifest = DatasetManifest(os.path.abspath(out_dir))
    for i, src in enumerate(paths):
        stem = os.path.splitext(os.path.basename(src))[0]
        clean = load_image(src)
        label = f"pair/{i}"
        degraded = degrade_one(clean, degrader, rng.split(label))
        rel_c, rel_d = f"clean/{stem}.png", f"degraded/{stem}.png"
        save_image(clean, os.path.join(out_dir, rel_c))
        save_image(Image(degraded.data, 8), os.path.join(out_dir, rel_d), bits=8)
        manifest.entries.append({
            "index": i, "name": stem, "clean_path": rel_c, "degraded_path": rel_d,
            "clean_sha256": sha256_file(os.path.join(out_dir, rel_c)),
            "degraded_sha256": sha256_file(os.path.join(out_dir, rel_d)),
            "seed": rng.seed, "rng_path": "/".join(rng.split(label).path),
            "config_hash": chash, "degrader": kind,
        })
    manifest.write()
    return manifest


def write_images(images, directory, prefix="img") -> list:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = os.path.join(directory, f"{prefix}_{i:04d}.png")
        save_image(img, p)
        paths.append(p)
    return paths
