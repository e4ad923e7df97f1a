"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic   b"SCMOECKP"
    u32     format version
    u32     header length, then header bytes: canonical JSON
            {"config": ..., "meta": ...}
    u32     blob count, then per blob:
            u16 name length, name (utf-8), u8 ndim, u32 * ndim extents,
            raw little-endian float64 data in row-major order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SCMOECKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save(path: str | Path, config: dict, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = canonical_json({"config": config, "meta": meta or {}})
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<HB", len(raw), arr.ndim) + raw)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Returns (config, arrays, meta)."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 16
    header = json.loads(buf[pos:pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<HB", buf, pos)
        pos += 3
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return header["config"], arrays, header["meta"]


def model_arrays(model) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.named_parameters()}


def load_into(model, arrays: dict[str, np.ndarray], strict: bool = True) -> list[str]:
    """Copy matching arrays into ``model``'s parameters; returns names that were filled."""
    filled = []
    for name, p in model.named_parameters():
        if name not in arrays:
            if strict:
                raise CheckpointError(f"missing parameter {name}")
            continue
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {p.shape}")
        p.data[...] = arrays[name]
        filled.append(name)
    return filled


def average(paths) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Element-wise mean of the model parameters of several checkpoints with one config.

    Optimizer state is dropped; meta is taken from the last path plus the averaged sources.
    """
    paths = list(paths)
    if not paths:
        raise CheckpointError("nothing to average")
    config, acc, meta = load(paths[0])
    acc = {k: v.copy() for k, v in acc.items() if not k.startswith("adam.")}
    for path in paths[1:]:
        cfg, arrays, meta = load(path)
        if cfg != config:
            raise CheckpointError(f"{path}: config differs from {paths[0]}")
        for k in acc:
            if k not in arrays or arrays[k].shape != acc[k].shape:
                raise CheckpointError(f"{path}: incompatible parameter {k}")
            acc[k] += arrays[k]
    for k in acc:
        acc[k] /= len(paths)
    return config, acc, {**meta, "averaged": [str(p) for p in paths]}
