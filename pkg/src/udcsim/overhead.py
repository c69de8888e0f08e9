"""Parameter and multiply-accumulate accounting."""
from __future__ import annotations

import torch
import torch.nn as nn

from .dwformer import DWFormer, RestorerConfig


def _as_module(obj) -> nn.Module:
    if isinstance(obj, nn.Module):
        return obj
    if isinstance(obj, RestorerConfig):
        with torch.device("meta"):
            return DWFormer(obj)
    raise TypeError(f"cannot count {type(obj).__name__}")


def count_params(obj) -> int:
    """Learnable scalars (weights, biases, norm affine terms); running statistics excluded."""
    return sum(p.numel() for p in _as_module(obj).parameters() if p.requires_grad)


def conv_macs(conv: nn.Conv2d, out_shape) -> int:
    out_elems = 1
    for s in out_shape[1:]:
        out_elems *= int(s)
    kh, kw = conv.kernel_size
    return out_elems * kh * kw * (conv.in_channels // conv.groups)


def count_macs(obj, resolution) -> int:
    """Convolution MACs for one image: output elements x kernel area x input channels per group.

    Norms, activations, pooling and operations on pooled descriptors are not counted.
    """
    module = _as_module(obj)
    h, w = (resolution, resolution) if isinstance(resolution, int) else resolution
    total = 0

    def hook(m, inp, out):
        nonlocal total
        total += conv_macs(m, out.shape)

    handles = [m.register_forward_hook(hook) for m in module.modules() if isinstance(m, nn.Conv2d)]
    try:
        device = next(module.parameters()).device
        with torch.no_grad():
            module(torch.zeros(1, 3, h, w, device=device))
    finally:
        for hd in handles:
            hd.remove()
    return total
