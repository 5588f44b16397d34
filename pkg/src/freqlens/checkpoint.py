"""FQL1 checkpoint format.

Layout: magic bytes "FQL1", a little-endian uint32 byte length, a UTF-8 JSON
metadata document (layer descriptors, tensor shapes, quant/FAT flags, RNG
seed, epoch), then the raw little-endian float32 parameter and buffer
payloads concatenated in declaration order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import BatchNorm2d, Conv2d, Linear, ResNet, build_resnet

MAGIC = b"FQL1"


class CheckpointError(ValueError):
    pass


def _layer_descriptors(net):
    layers = []
    for name, mod in net.named_modules():
        if isinstance(mod, Conv2d):
            layers.append(dict(name=mod.name, kind="conv2d", c_in=mod.c_in, c_out=mod.c_out,
                               kernel=mod.kernel, stride=mod.stride, padding=mod.padding,
                               quant_bits=mod.quant_bits, fat=mod.fat))
        elif isinstance(mod, BatchNorm2d):
            layers.append(dict(name=mod.name, kind="batchnorm2d", channels=mod.channels,
                               momentum=mod.momentum, eps=mod.eps))
        elif isinstance(mod, Linear):
            layers.append(dict(name=mod.name, kind="linear", c_in=mod.c_in, c_out=mod.c_out,
                               quant_bits=mod.quant_bits))
    return layers


def save_checkpoint(net: ResNet, path, seed=0, epoch=0, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = list(net.state_items())
    meta = {
        "format": "FQL1",
        "model": net.config,
        "layers": _layer_descriptors(net),
        "tensors": [dict(name=name, shape=list(arr.shape), kind=kind)
                    for name, arr, kind in state],
        "seed": int(seed),
        "epoch": int(epoch),
    }
    meta.update(extra or {})
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr, _ in state:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def read_metadata(path):
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (meta_len,) = struct.unpack("<I", raw[4:8])
    if 8 + meta_len > len(raw):
        raise CheckpointError(f"{path}: metadata length {meta_len} exceeds file size {len(raw)}")
    try:
        meta = json.loads(raw[8:8 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata document: {exc}") from exc
    return meta, raw[8 + meta_len:]


def load_checkpoint(path):
    """Rebuild the network and its exact state. Returns (net, metadata)."""
    meta, payload = read_metadata(path)
    try:
        net = build_resnet(**meta["model"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: cannot rebuild model from metadata: {exc}") from exc

    state = list(net.state_items())
    declared = meta.get("tensors", [])
    if len(declared) != len(state):
        raise CheckpointError(
            f"{path}: checkpoint declares {len(declared)} tensors, model has {len(state)}"
        )
    offset = 0
    for (name, arr, kind), decl in zip(state, declared):
        if decl["name"] != name or tuple(decl["shape"]) != arr.shape:
            raise CheckpointError(
                f"{path}: tensor mismatch: checkpoint has {decl['name']}{decl['shape']}, "
                f"model expects {name}{list(arr.shape)}"
            )
        nbytes = arr.size * 4
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(
                f"{path}: payload truncated at tensor {name!r} "
                f"(need {nbytes} bytes, have {len(chunk)})"
            )
        arr[...] = np.frombuffer(chunk, dtype="<f4").reshape(arr.shape)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing payload bytes")
    net.eval()
    return net, meta
