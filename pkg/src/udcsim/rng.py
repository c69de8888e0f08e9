"""Seeded random streams with labeled, position-independent substreams."""
from __future__ import annotations

import hashlib

import numpy as np
import torch


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode()).digest()[:4], "little")


class RngStream:
    """A reproducible random stream.

    Sequential draws go through :attr:`numpy`, whose state advances with use.
    :meth:`split` derives an independent child from the seed and the label
    path only, so children do not depend on how much the parent was consumed.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        self._seq = np.random.SeedSequence(
            entropy=self.seed, spawn_key=tuple(_label_key(p) for p in self.path)
        )
        self._gen = None

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={'/'.join(self.path) or '.'})"

    def split(self, label) -> "RngStream":
        return RngStream(self.seed, self.path + (str(label),))

    @property
    def numpy(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.Generator(np.random.PCG64(self._seq))
        return self._gen

    def derived_seed(self) -> int:
        """A 63-bit integer seed determined by seed and path."""
        return int(self._seq.generate_state(2, np.uint64)[0] >> np.uint64(1))

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(self.derived_seed())
        return g
