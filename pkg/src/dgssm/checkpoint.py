"""Manifest-ordered checkpoint files built on the TNSR tensor format.

Layout::

    DGSSM-CKPT v1
    config <n>
    key = value            (n lines)
    manifest <m>
    <name> <ndim> <d0> ... (m lines)
    <m TNSR blocks in manifest order>
"""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import Tensor, read_tensor, write_tensor

MAGIC = "DGSSM-CKPT v1"


def save_checkpoint(path, tensors: "dict[str, Tensor]", config: "dict[str, str] | None" = None) -> None:
    config = config or {}
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC}\n".encode())
        fh.write(f"config {len(config)}\n".encode())
        for k, v in config.items():
            fh.write(f"{k} = {v}\n".encode())
        fh.write(f"manifest {len(tensors)}\n".encode())
        for name, t in tensors.items():
            if any(c.isspace() for c in name):
                raise ValueError(f"parameter name may not contain whitespace: {name!r}")
            shape = t.shape
            fh.write((f"{name} {len(shape)} " + " ".join(map(str, shape))).rstrip().encode() + b"\n")
        for t in tensors.values():
            write_tensor(fh, t)


def load_checkpoint(path, dtype=np.float64) -> "tuple[OrderedDict[str, Tensor], dict[str, str]]":
    with open(path, "rb") as fh:
        if fh.readline().decode().strip() != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        tag, n = fh.readline().decode().split()
        if tag != "config":
            raise ValueError("missing config block")
        config = {}
        for _ in range(int(n)):
            k, _, v = fh.readline().decode().rstrip("\n").partition(" = ")
            config[k] = v
        tag, m = fh.readline().decode().split()
        if tag != "manifest":
            raise ValueError("missing manifest block")
        manifest = []
        for _ in range(int(m)):
            parts = fh.readline().decode().split()
            ndim = int(parts[1])
            manifest.append((parts[0], tuple(int(d) for d in parts[2:2 + ndim])))
        out: OrderedDict[str, Tensor] = OrderedDict()
        for name, shape in manifest:
            t = read_tensor(fh, dtype)
            if t.shape != shape:
                raise ValueError(f"{name}: payload shape {t.shape} != manifest shape {shape}")
            out[name] = t
    return out, config
