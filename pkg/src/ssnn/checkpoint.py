"""Binary checkpoint container for (theta, phi), config and normalization stats.

Layout (little-endian): 8-byte magic ``SSNNCKP1``, u32 version, u32 tensor
count, then per tensor: u32 name length, name bytes, u32 rank, u32 dims,
float64 values; finally a u32 length and a UTF-8 JSON blob.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import _atomic_write
from .errors import DatasetParseError, SchemaError
from .generative import GenerativeParams, theta_shapes
from .inference import InferenceParams, phi_shapes
from .numerics import ParamStore

MAGIC = b"SSNNCKP1"
VERSION = 1


@dataclass
class Checkpoint:
    theta: GenerativeParams
    phi: InferenceParams
    config: dict = field(default_factory=dict)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    iteration: int = 0


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(ckpt.theta.store) + len(ckpt.phi.store))]
    for prefix, store in (("theta.", ckpt.theta.store), ("phi.", ckpt.phi.store)):
        for name, value in store.items():
            arr = np.asarray(value, dtype="<f8")
            key = (prefix + name).encode("utf-8")
            parts.append(struct.pack("<I", len(key)) + key + struct.pack("<I", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr).tobytes())
    meta = {
        "config": ckpt.config,
        "dims": {"K": ckpt.theta.K, "M": ckpt.theta.M, "m": ckpt.theta.m, "h": ckpt.theta.h,
                 "e": ckpt.phi.e, "q": ckpt.phi.q},
        "self_transitions": ckpt.theta.self_transitions,
        "iteration": ckpt.iteration,
        "normalization": None if ckpt.mean is None else {"mean": [float(v) for v in ckpt.mean],
                                                         "std": [float(v) for v in ckpt.std]},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically (temp file + rename)."""
    _atomic_write(Path(path), encode(ckpt))


def decode(data: bytes, source: str = "<bytes>") -> Checkpoint:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise DatasetParseError(f"{source}: offset {pos}: truncated while reading {what}")
        out = data[pos:pos + n]
        pos += n
        return out

    if take(8, "magic") != MAGIC:
        raise DatasetParseError(f"{source}: not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise SchemaError(f"{source}: unsupported checkpoint version {version}")
    tensors = {}
    for i in range(count):
        (n,) = struct.unpack("<I", take(4, f"name length of tensor {i}"))
        name = take(n, f"name of tensor {i}").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * size, f"values of {name}"), dtype="<f8").reshape(shape).copy()
    (n,) = struct.unpack("<I", take(4, "metadata length"))
    meta = json.loads(take(n, "metadata").decode("utf-8"))
    if pos != len(data):
        raise DatasetParseError(f"{source}: offset {pos}: trailing bytes")
    d = meta["dims"]
    stores = {"theta": ParamStore(), "phi": ParamStore()}
    expected = {"theta": theta_shapes(d["K"], d["M"], d["m"], d["h"]),
                "phi": phi_shapes(d["K"], d["M"], d["m"], d["e"], d["q"])}
    for side in ("theta", "phi"):
        for name in expected[side]:
            key = f"{side}.{name}"
            if key not in tensors:
                raise SchemaError(f"{source}: missing tensor {key!r}")
            stores[side].register(name, tensors[key])
    theta = GenerativeParams(d["K"], d["M"], d["m"], d["h"], stores["theta"], meta["self_transitions"])
    phi = InferenceParams(d["K"], d["M"], d["m"], d["e"], d["q"], stores["phi"])
    norm = meta.get("normalization")
    mean = None if norm is None else np.array(norm["mean"])
    std = None if norm is None else np.array(norm["std"])
    return Checkpoint(theta, phi, meta.get("config", {}), mean, std, meta.get("iteration", 0))


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes(), str(path))
