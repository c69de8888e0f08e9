"""Closed-form statistical degradation: per-channel gain, PSF blur, heteroscedastic noise.

The oracle pipeline is ``quantize(convolve_psf(apply_gamma(x)) + n)`` with
``n ~ N(0, sigma_read**2 + sigma_shot * signal)`` drawn per pixel and channel.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .imaging import Image
from .rng import RngStream

# scipy "mirror" == numpy/torch "reflect": the edge pixel is not repeated.
BORDER_MODE = "mirror"


@dataclass
class SgmConfig:
    gamma: tuple = (1.0, 1.0, 1.0)
    psf: np.ndarray = field(default_factory=lambda: np.ones((1, 1)))
    sigma_read: float = 0.0
    sigma_shot: float = 0.0
    bit_depth: Optional[int] = 8

    def __post_init__(self):
        self.gamma = tuple(float(g) for g in self.gamma)
        self.psf = np.asarray(self.psf, dtype=np.float64)
        validate_gamma(self.gamma)
        validate_psf(self.psf)
        if self.sigma_read < 0 or self.sigma_shot < 0:
            raise ConfigError("noise parameters must be non-negative")
        if self.bit_depth is not None and int(self.bit_depth) < 1:
            raise ConfigError("bit_depth must be >= 1 or None")

    def to_dict(self) -> dict:
        return {
            "gamma": list(self.gamma),
            "psf": self.psf.tolist(),
            "sigma_read": self.sigma_read,
            "sigma_shot": self.sigma_shot,
            "bit_depth": self.bit_depth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SgmConfig":
        d = dict(d)
        if "preset" in d:
            base = preset(d.pop("preset")).to_dict()
            base.update(d)
            d = base
        if isinstance(d.get("psf"), str):
            d["psf"] = load_psf(d["psf"])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def noise_variance(self, signal) -> np.ndarray:
        """Per-pixel variance of the additive noise, excluding quantization."""
        return self.sigma_read**2 + self.sigma_shot * np.maximum(np.asarray(signal, float), 0.0)


def validate_gamma(gamma):
    if len(gamma) != 3:
        raise ConfigError("gamma needs one factor per color channel")
    if not all(0.0 < g <= 1.0 for g in gamma):
        raise ConfigError(f"gamma factors must lie in (0, 1], got {gamma}")


def validate_psf(psf: np.ndarray):
    if psf.ndim != 2 or psf.shape[0] != psf.shape[1]:
        raise ConfigError(f"PSF must be a square 2-D kernel, got shape {psf.shape}")
    if psf.shape[0] % 2 == 0:
        raise ConfigError(f"PSF size must be odd, got {psf.shape[0]}")
    if (psf < 0).any():
        raise ConfigError("PSF must be non-negative")
    if abs(psf.sum() - 1.0) > 1e-6:
        raise ConfigError(f"PSF must sum to 1 (sums to {psf.sum():.8f})")


def load_psf(path) -> np.ndarray:
    """Read a PSF from a whitespace-delimited text matrix and normalize it."""
    k = np.atleast_2d(np.loadtxt(path, dtype=np.float64))
    if k.sum() <= 0:
        raise ConfigError(f"{path}: PSF has no mass")
    return k / k.sum()


def gaussian_mixture_psf(size: int, components) -> np.ndarray:
    """Sum of anisotropic Gaussians ``(weight, sigma_y, sigma_x, angle_rad)``, normalized."""
    if size % 2 == 0:
        raise ConfigError("PSF size must be odd")
    r = (size - 1) / 2.0
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    k = np.zeros((size, size))
    for weight, sy, sx, theta in components:
        c, s = np.cos(theta), np.sin(theta)
        u = c * xx + s * yy
        v = -s * xx + c * yy
        g = np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
        k += weight * g / g.sum()
    return k / k.sum()


def preset(name: str) -> SgmConfig:
    """Synthetic desk-scale oracle presets. These are invented settings, not measured ones."""
    if name in ("poled", "p-oled", "P-OLED-like"):
        psf = gaussian_mixture_psf(9, [(0.6, 0.9, 1.4, 0.3), (0.4, 2.2, 2.8, -0.4)])
        return SgmConfig((0.30, 0.35, 0.40), psf, 0.02, 0.01, 8)
    if name in ("toled", "t-oled", "T-OLED-like"):
        psf = gaussian_mixture_psf(9, [(0.75, 0.7, 1.1, 0.2), (0.25, 1.6, 2.4, 1.2)])
        return SgmConfig((0.85, 0.90, 0.95), psf, 0.02, 0.01, 8)
    raise ConfigError(f"unknown SGM preset {name!r}")


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------


def apply_gamma(x: Image, gamma) -> Image:
    validate_gamma(tuple(gamma))
    g = np.asarray(gamma, dtype=np.float64)
    return Image(x.data * g[None, None, :], x.source_bit_depth)


def convolve_psf(x: Image, psf) -> Image:
    psf = np.asarray(psf, dtype=np.float64)
    validate_psf(psf)
    out = np.empty_like(x.data)
    for c in range(3):
        out[..., c] = ndimage.convolve(x.data[..., c], psf, mode=BORDER_MODE)
    return Image(out, x.source_bit_depth)


def convolve_tiled_psf(x: Image, psf_grid) -> Image:
    """Spatially varying blur: a (rows, cols, K, K) grid of kernels, one per image tile.

    Each tile takes its pixels from the whole image convolved with that tile's
    kernel, so tile seams see correct neighbours.
    """
    grid = np.asarray(psf_grid, dtype=np.float64)
    if grid.ndim != 4:
        raise ConfigError("tiled PSF must have shape (rows, cols, K, K)")
    rows, cols = grid.shape[:2]
    r_edges = np.linspace(0, x.height, rows + 1).round().astype(int)
    c_edges = np.linspace(0, x.width, cols + 1).round().astype(int)
    out = np.empty_like(x.data)
    for i in range(rows):
        for j in range(cols):
            blurred = convolve_psf(x, grid[i, j]).data
            sl = (slice(r_edges[i], r_edges[i + 1]), slice(c_edges[j], c_edges[j + 1]))
            out[sl] = blurred[sl]
    return Image(out, x.source_bit_depth)


def sample_hetero_noise(signal: Image, sigma_read: float, sigma_shot: float, rng: RngStream) -> np.ndarray:
    if sigma_read < 0 or sigma_shot < 0:
        raise ConfigError("noise parameters must be non-negative")
    if sigma_read == 0 and sigma_shot == 0:
        return np.zeros_like(signal.data)
    var = sigma_read**2 + sigma_shot * np.maximum(signal.data, 0.0)
    return rng.numpy.standard_normal(signal.data.shape) * np.sqrt(var)


def quantize(x: Image, bit_depth: Optional[int]) -> Image:
    if bit_depth is None:
        return Image(x.data.copy(), x.source_bit_depth)
    if int(bit_depth) < 1:
        raise ConfigError("bit_depth must be >= 1")
    peak = 2 ** int(bit_depth) - 1
    q = np.floor(np.clip(x.data, 0.0, 1.0) * peak + 0.5) / peak
    return Image(q, x.source_bit_depth)


def sgm_degrade(x: Image, cfg: SgmConfig, rng: RngStream) -> Image:
    blurred = convolve_psf(apply_gamma(x, cfg.gamma), cfg.psf)
    noise = sample_hetero_noise(blurred, cfg.sigma_read, cfg.sigma_shot, rng)
    return quantize(Image(blurred.data + noise, x.source_bit_depth), cfg.bit_depth)


def quantization_variance(bit_depth: Optional[int]) -> float:
    """Variance of uniform rounding error on a grid of ``bit_depth`` bits."""
    if bit_depth is None:
        return 0.0
    step = 1.0 / (2 ** int(bit_depth) - 1)
    return step * step / 12.0
