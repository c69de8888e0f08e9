"""Image container, PNG I/O, patch sampling, augmentation and quality metrics."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import cv2
import numpy as np
import torch
from scipy import ndimage

from .errors import DimensionError, FormatError
from .rng import RngStream

PSNR_CAP = 99.0


@dataclass
class Image:
    """H x W x 3 float image, nominally in [0, 1]."""

    data: np.ndarray
    source_bit_depth: int = 8

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise DimensionError(f"expected H x W x 3 array, got shape {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise DimensionError("image must be at least 1x1")

    @property
    def shape(self):
        return self.data.shape

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class PatchPair:
    clean: Image
    degraded: Image
    origin: tuple = (0, 0)

    def __post_init__(self):
        if self.clean.shape != self.degraded.shape:
            raise DimensionError(
                f"clean {self.clean.shape} and degraded {self.degraded.shape} differ"
            )


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def load_image(path) -> Image:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"could not decode image: {path}")
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise FormatError(f"{path}: expected an RGB raster, got shape {raw.shape}")
    if raw.dtype == np.uint8:
        bits = 8
    elif raw.dtype == np.uint16:
        bits = 16
    else:
        raise FormatError(f"{path}: unsupported sample type {raw.dtype}")
    rgb = raw[..., ::-1].astype(np.float64) / (2**bits - 1)
    return Image(rgb, source_bit_depth=bits)


def to_integer(img: Image, bits: Optional[int] = None) -> np.ndarray:
    """Clamp to [0, 1] and quantize to the integer grid of ``bits``."""
    bits = bits or img.source_bit_depth
    peak = 2**bits - 1
    q = np.floor(np.clip(img.data, 0.0, 1.0) * peak + 0.5)
    return q.astype(np.uint8 if bits <= 8 else np.uint16)


def save_image(img: Image, path, bits: Optional[int] = None) -> None:
    bits = bits or img.source_bit_depth
    if bits not in (8, 16):
        raise FormatError(f"PNG output supports 8 or 16 bits, not {bits}")
    path = os.fspath(path)
    if not cv2.imwrite(path, np.ascontiguousarray(to_integer(img, bits)[..., ::-1])):
        raise OSError(f"could not write {path}")


# ---------------------------------------------------------------------------
# tensors
# ---------------------------------------------------------------------------


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack Images (or H x W x 3 / N x H x W x 3 arrays) into an N x 3 x H x W tensor."""
    if isinstance(images, Image):
        images = [images]
    if isinstance(images, np.ndarray):
        arr = images if images.ndim == 4 else images[None]
    else:
        arr = np.stack([im.data if isinstance(im, Image) else im for im in images])
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_images(t: torch.Tensor, bit_depth: int = 8) -> list:
    arr = t.detach().cpu().double().numpy().transpose(0, 2, 3, 1)
    return [Image(a, source_bit_depth=bit_depth) for a in arr]


# ---------------------------------------------------------------------------
# patches and augmentation
# ---------------------------------------------------------------------------


def crop_patches(pair, size: int, count: int, rng: RngStream) -> list:
    clean, degraded = pair
    if clean.shape != degraded.shape:
        raise DimensionError("pair images differ in size")
    h, w = clean.height, clean.width
    if size > min(h, w) or size < 1:
        raise DimensionError(f"patch size {size} does not fit a {h}x{w} image")
    gen = rng.numpy
    out = []
    for _ in range(count):
        r = int(gen.integers(0, h - size + 1))
        c = int(gen.integers(0, w - size + 1))
        out.append(
            PatchPair(
                Image(clean.data[r : r + size, c : c + size], clean.source_bit_depth),
                Image(degraded.data[r : r + size, c : c + size], degraded.source_bit_depth),
                (r, c),
            )
        )
    return out


@dataclass(frozen=True)
class Transform:
    """Flips followed by ``rot90`` quarter turns (counter-clockwise)."""

    flip_h: bool = False
    flip_v: bool = False
    rot90: int = 0

    def apply(self, arr: np.ndarray) -> np.ndarray:
        # arr is H x W x C (or N x H x W x C with axes offset)
        ax = arr.ndim - 3
        if self.flip_h:
            arr = np.flip(arr, axis=ax + 1)
        if self.flip_v:
            arr = np.flip(arr, axis=ax)
        if self.rot90 % 4:
            arr = np.rot90(arr, k=self.rot90 % 4, axes=(ax, ax + 1))
        return np.ascontiguousarray(arr)


AUGMENT_MODES = ("flips-only", "flips-and-rotations")


def sample_transform(mode: str, rng: RngStream) -> Transform:
    if mode not in AUGMENT_MODES:
        raise ValueError(f"unknown augmentation mode {mode!r}")
    gen = rng.numpy
    fh, fv = (bool(b) for b in gen.integers(0, 2, size=2))
    k = int(gen.integers(0, 4)) if mode == "flips-and-rotations" else 0
    return Transform(fh, fv, k)


def augment(pair: PatchPair, mode: str, rng: RngStream, transform: Optional[Transform] = None) -> PatchPair:
    """Apply one sampled (or forced) transform identically to both images."""
    if mode == "flips-and-rotations" and pair.clean.height != pair.clean.width:
        raise DimensionError("rotations need square patches")
    t = transform if transform is not None else sample_transform(mode, rng)
    if t.rot90 % 4 and pair.clean.height != pair.clean.width:
        raise DimensionError("rotations need square patches")
    return PatchPair(
        Image(t.apply(pair.clean.data), pair.clean.source_bit_depth),
        Image(t.apply(pair.degraded.data), pair.degraded.source_bit_depth),
        pair.origin,
    )


def resize(img: Image, height: int, width: int, method: str = "bilinear") -> Image:
    interp = {"bilinear": cv2.INTER_LINEAR, "area": cv2.INTER_AREA, "bicubic": cv2.INTER_CUBIC}
    if method not in interp:
        raise ValueError(f"unknown resampling filter {method!r}")
    out = cv2.resize(img.data, (width, height), interpolation=interp[method])
    return Image(out, img.source_bit_depth)


def fit_landscape(img: Image, height: int, width: int, method: str = "bilinear") -> Image:
    """Rotate portrait inputs a quarter turn when the target is landscape, then resize."""
    data = img.data
    if (data.shape[0] > data.shape[1]) != (height > width):
        data = np.rot90(data, 1, axes=(0, 1))
    return resize(Image(data, img.source_bit_depth), height, width, method)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _check_same(a: Image, b: Image):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")


def psnr(a: Image, b: Image) -> float:
    _check_same(a, b)
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse < 1e-12:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _valid_filter(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    m = win.shape[0] // 2
    out = ndimage.correlate(x, win, mode="constant")
    return out[m : x.shape[0] - m, m : x.shape[1] - m]


def ssim(a: Image, b: Image, data_range: float = 1.0) -> float:
    """Mean SSIM over fully-covered window positions, averaged over channels."""
    _check_same(a, b)
    if min(a.height, a.width) < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")
    win = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    scores = []
    for c in range(3):
        x, y = a.data[..., c], b.data[..., c]
        mx, my = _valid_filter(x, win), _valid_filter(y, win)
        vx = _valid_filter(x * x, win) - mx * mx
        vy = _valid_filter(y * y, win) - my * my
        cxy = _valid_filter(x * y, win) - mx * my
        smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        scores.append(smap.mean())
    return float(np.mean(scores))
