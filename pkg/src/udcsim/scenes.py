"""Procedural clean images (dead-leaves scenes) standing in for a photo corpus."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .imaging import Image
from .rng import RngStream


def dead_leaves(height: int, width: int, rng: RngStream, n_shapes: int = 120,
                r_min: float = 2.0, r_max: float = None) -> Image:
    """Occluding disks and boxes with power-law radii over a smooth gradient.

    Radii follow the 1/r^3 density of the dead-leaves model, which gives
    scale-invariant edge statistics close to natural photographs.
    """
    gen = rng.numpy
    r_max = r_max or max(height, width) / 4.0
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)

    # low-frequency background
    c0, c1 = gen.uniform(0.1, 0.9, size=(2, 3))
    t = (np.cos(gen.uniform(0, 2 * np.pi)) * xx / width + np.sin(gen.uniform(0, 2 * np.pi)) * yy / height)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    img = c0[None, None, :] * (1 - t[..., None]) + c1[None, None, :] * t[..., None]

    # inverse-CDF sampling of p(r) ~ r^-3 on [r_min, r_max]
    u = gen.uniform(size=n_shapes)
    radii = 1.0 / np.sqrt(1.0 / r_min**2 - u * (1.0 / r_min**2 - 1.0 / r_max**2))
    for r in radii:
        cy, cx = gen.uniform(-r, height + r), gen.uniform(-r, width + r)
        color = gen.uniform(0.02, 0.98, size=3)
        if gen.uniform() < 0.7:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            ay = r * gen.uniform(0.4, 1.0)
            mask = (np.abs(yy - cy) <= ay) & (np.abs(xx - cx) <= r)
        if gen.uniform() < 0.3:
            # shaded leaf: linear ramp across the shape
            ramp = 0.75 + 0.25 * np.clip((xx - cx) / (2 * r) + 0.5, 0, 1)
            img[mask] = color[None, :] * ramp[mask][:, None]
        else:
            img[mask] = color
    # slight optical softening so edges are not aliased
    img = ndimage.gaussian_filter(img, sigma=(0.6, 0.6, 0.0), mode="nearest")
    return Image(np.clip(img, 0.0, 1.0))


def scene_corpus(n: int, height: int, width: int, rng: RngStream, **kw) -> list:
    """``n`` independent scenes; scene ``i`` depends only on the seed and ``i``."""
    return [dead_leaves(height, width, rng.split(f"scene/{i}"), **kw) for i in range(n)]
