"""Checkpoint persistence: one JSON header line plus raw parameter bytes.

The header records the format version, the model kind and sizing, the ordered
parameter block names/shapes, the element dtype, and byte order. The payload
is every block's float32 data, little-endian, concatenated in header order.
Round-trips are bit-exact; writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np
import torch

from .nets import ArchConfig, AttentionMechanismNet, MlpMechanismNet, parameter_blocks

FORMAT_NAME = "damech-checkpoint"
FORMAT_VERSION = 1


def _describe(model) -> dict:
    if isinstance(model, AttentionMechanismNet):
        a = model.arch
        return {"kind": "attention", "arch": {"hidden": a.hidden, "layers": a.layers, "heads": a.heads}}
    if isinstance(model, MlpMechanismNet):
        hidden = model.body[0].out_features
        layers = sum(1 for b in model.body if isinstance(b, torch.nn.Linear))
        return {"kind": "mlp", "arch": {"m": model.m, "n": model.n, "hidden": hidden, "layers": layers}}
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(path, model, meta: dict | None = None) -> None:
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        **_describe(model),
        "blocks": [[name, list(p.shape)] for name, p in parameter_blocks(model)],
        "dtype": "float32",
        "byteorder": "little",
        "meta": meta or {},
    }
    payload = b"".join(
        p.detach().cpu().numpy().astype("<f4").tobytes() for _, p in parameter_blocks(model)
    )
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Rebuild the model from ``path``; returns (model, meta)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line)
    if header.get("format") != FORMAT_NAME:
        raise ValueError(f"{path} is not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    if header.get("dtype") != "float32" or header.get("byteorder") != "little":
        raise ValueError("unsupported checkpoint element encoding")

    arch = header["arch"]
    if header["kind"] == "attention":
        model = AttentionMechanismNet(ArchConfig(**arch), seed=None)
    elif header["kind"] == "mlp":
        model = MlpMechanismNet(arch["m"], arch["n"], hidden=arch["hidden"],
                                layers=arch["layers"], seed=None)
    else:
        raise ValueError(f"unknown model kind {header['kind']!r}")

    declared = [(name, tuple(shape)) for name, shape in header["blocks"]]
    actual = [(name, tuple(p.shape)) for name, p in parameter_blocks(model)]
    if declared != actual:
        raise ValueError("checkpoint blocks do not match the rebuilt architecture")

    flat = np.frombuffer(payload, dtype="<f4")
    expected = sum(int(np.prod(shape)) for _, shape in declared)
    if flat.size != expected:
        raise ValueError(f"payload holds {flat.size} values, header declares {expected}")
    offset = 0
    with torch.no_grad():
        for _, param in parameter_blocks(model):
            k = param.numel()
            param.copy_(torch.from_numpy(flat[offset : offset + k].copy()).reshape(param.shape))
            offset += k
    return model, header.get("meta", {})
