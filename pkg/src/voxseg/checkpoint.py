"""Versioned binary checkpoints plus a JSON manifest.

Layout (little-endian)::

    magic    8 bytes  b"VXSEGCK\\0"
    version  u32
    desc_len u32, then desc_len bytes of UTF-8 JSON (network spec descriptor)
    count    u32 number of blobs
    per blob: name_len u16, name, section u8 (0 params, 1 velocity),
              ndim u8, ndim x u32 shape, float64 payload in C order

Blobs follow parameter declaration order, parameters before velocities.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .network import NetworkSpec, NetworkState

__all__ = ["CHECKPOINT_VERSION", "CheckpointError", "save_checkpoint", "load_checkpoint", "manifest_path"]

MAGIC = b"VXSEGCK\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def manifest_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(path, state: NetworkState, spec: NetworkSpec, seed=None, epoch=None, config=None) -> None:
    """Write the checkpoint and its manifest (``<path>.json``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    desc = json.dumps(spec.to_dict(), sort_keys=True).encode()
    blobs = [(k, 0, v) for k, v in state.params.items()]
    blobs += [(k, 1, v) for k, v in state.velocity.items()]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(desc)))
        fh.write(desc)
        fh.write(struct.pack("<I", len(blobs)))
        for name, section, arr in blobs:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", section, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "spec_name": spec.name,
        "seed": seed,
        "epoch": epoch,
        "config_hash": (
            hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]
            if config is not None
            else None
        ),
        "config": config,
        "num_parameters": state.num_parameters(),
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[NetworkState, NetworkSpec]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(8) != MAGIC:
        raise CheckpointError("not a voxseg checkpoint (bad magic)")
    version, desc_len = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    spec = NetworkSpec.from_dict(json.loads(take(desc_len).decode()))
    (count,) = struct.unpack("<I", take(4))
    params, velocity = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        section, ndim = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        (params if section == 0 else velocity)[name] = arr
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes in checkpoint")
    expected = set()
    for layer in spec.layers():
        expected |= {f"{layer.name}.weight", f"{layer.name}.bias"}
        if layer.has_prelu:
            expected.add(f"{layer.name}.slope")
    if set(params) != expected:
        raise CheckpointError("checkpoint parameters do not match its network spec")
    for layer in spec.layers():
        w = params[f"{layer.name}.weight"]
        if w.shape != (layer.out_channels, layer.in_channels) + layer.kernel:
            raise CheckpointError(f"{layer.name}.weight has shape {w.shape}")
    return NetworkState(params, velocity or {}), spec
