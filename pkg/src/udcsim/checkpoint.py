"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"UDCCKPT1"
    8 bytes   uint64 header length N
    N bytes   UTF-8 JSON header
    ...       tensor payload, raw little-endian bytes back to back

The header holds ``kind`` (generator / discriminator / restorer), ``config``
(architecture keys), ``step`` (training step), ``meta`` (free-form), a
``tensors`` index of ``{name, dtype, shape, offset, nbytes}`` with offsets
relative to the payload start, and ``extra_state`` for non-tensor module state
such as batch-norm modes.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np
import torch

from .errors import IntegrityError

MAGIC = b"UDCCKPT1"
_EXTRA = "_extra_state"


def state_checksum(module_or_state) -> str:
    state = module_or_state.state_dict() if hasattr(module_or_state, "state_dict") else module_or_state
    h = hashlib.sha256()
    for name in sorted(state):
        v = state[name]
        h.update(name.encode())
        if torch.is_tensor(v):
            h.update(str(v.dtype).encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
        else:
            h.update(json.dumps(v, sort_keys=True, default=str).encode())
    return h.hexdigest()


def save_checkpoint(path, module, kind: str, config: dict, step: int = 0, meta: dict = None) -> None:
    state = module.state_dict()
    index, blobs, extra, offset = [], [], {}, 0
    for name, value in state.items():
        if name.endswith(_EXTRA):
            extra[name] = value
            continue
        arr = value.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format": 1, "kind": kind, "config": config, "step": int(step), "meta": meta or {},
              "tensors": index, "extra_state": extra}
    hdr = json.dumps(header, sort_keys=True).encode()
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hdr)))
        f.write(hdr)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)


def read_checkpoint(path):
    """Return ``(header, state_dict)``."""
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise IntegrityError(f"{path}: not a checkpoint container")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n).decode())
        payload = f.read()
    state = {}
    for t in header["tensors"]:
        chunk = payload[t["offset"] : t["offset"] + t["nbytes"]]
        if len(chunk) != t["nbytes"]:
            raise IntegrityError(f"{path}: truncated tensor {t['name']}")
        arr = np.frombuffer(chunk, dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.copy())
    state.update(header.pop("extra_state", {}))
    return header, state


def load_module(path):
    """Rebuild the module recorded in a checkpoint; returns ``(module, header)``."""
    from .discriminator import DiscriminatorConfig, UNetDiscriminator
    from .dwformer import DWFormer, RestorerConfig
    from .generator import GeneratorConfig, MPGNet

    header, state = read_checkpoint(path)
    builders = {
        "generator": lambda c: MPGNet(GeneratorConfig.from_dict(c)),
        "discriminator": lambda c: UNetDiscriminator(DiscriminatorConfig.from_dict(c)),
        "restorer": lambda c: DWFormer(RestorerConfig.from_dict(c)),
    }
    if header.get("kind") not in builders:
        raise IntegrityError(f"{path}: unknown checkpoint kind {header.get('kind')!r}")
    module = builders[header["kind"]](header["config"])
    try:
        module.load_state_dict(state)
    except RuntimeError as e:
        raise IntegrityError(f"{path}: state does not match its recorded config: {e}") from e
    return module, header
