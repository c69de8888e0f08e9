"""Gradient checks and parameter-tree comparisons."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import state_checksum
from .rng import RngStream

__all__ = ["GradCheckResult", "directional_grad_check", "param_tree_diff", "state_checksum"]


@dataclass
class GradCheckResult:
    max_rel_error: float
    errors: list
    directions: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= 1e-3


def directional_grad_check(fn, inputs, rng: RngStream, directions: int = 50, eps: float = 1e-6,
                           params=None) -> GradCheckResult:
    """Compare analytic and central-difference directional derivatives of a scalar ``fn``.

    ``inputs`` is a list of float64 tensors passed to ``fn``; ``params`` an
    optional list of float64 parameters that ``fn`` closes over. Each of the
    ``directions`` random unit directions perturbs inputs and parameters jointly.
    """
    leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
    params = list(params or [])
    tensors = leaves + params
    if any(t.dtype != torch.float64 for t in tensors):
        raise TypeError("gradient checks run in float64")
    for p in params:
        p.grad = None
    out = fn(*leaves)
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    gen = rng.numpy
    errors = []
    with torch.no_grad():
        base = [t.detach().clone() for t in tensors]
        for _ in range(directions):
            dirs = [torch.from_numpy(gen.standard_normal(tuple(t.shape))) for t in tensors]
            norm = torch.sqrt(sum((d**2).sum() for d in dirs))
            dirs = [d / norm for d in dirs]
            analytic = float(sum((g * d).sum() for g, d in zip(grads, dirs)))
            vals = []
            for sign in (1.0, -1.0):
                for t, b, d in zip(tensors, base, dirs):
                    t.copy_(b + sign * eps * d)
                vals.append(float(fn(*leaves)))
            for t, b in zip(tensors, base):
                t.copy_(b)
            numeric = (vals[0] - vals[1]) / (2 * eps)
            scale = max(abs(analytic), abs(numeric), 1e-8)
            errors.append(abs(analytic - numeric) / scale)
    return GradCheckResult(float(np.max(errors)), errors, directions)


def param_tree_diff(a: nn.Module, b: nn.Module) -> dict:
    """Names present in only one tree and names whose shapes differ."""
    sa = {k: tuple(v.shape) for k, v in a.state_dict().items() if torch.is_tensor(v)}
    sb = {k: tuple(v.shape) for k, v in b.state_dict().items() if torch.is_tensor(v)}
    return {
        "only_a": sorted(set(sa) - set(sb)),
        "only_b": sorted(set(sb) - set(sa)),
        "shape": sorted(k for k in set(sa) & set(sb) if sa[k] != sb[k]),
    }


def changed_names(diff: dict) -> list:
    return sorted(set(diff["only_a"]) | set(diff["only_b"]) | set(diff["shape"]))
