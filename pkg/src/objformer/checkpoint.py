"""Binary checkpoint format.

::

    b"OBJF" | u32 version | u32 header length | JSON header | raw tensor data

All integers are little-endian. The JSON header carries the model config,
a tensor table (name, dtype, shape, byte offset into the data section),
the optimizer step count, the training RNG state and free-form metadata.
Tensor data is stored little-endian in C order, parameters first, then
the optimizer moments as ``adam.m/<name>`` and ``adam.v/<name>``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

MAGIC = b"OBJF"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    step: int = 0
    rng_state: Optional[dict] = None
    meta: dict = field(default_factory=dict)


def encode(ck: Checkpoint) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr in ck.tensors.items():
        a = np.ascontiguousarray(arr)
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        table.append({"name": name, "dtype": a.dtype.str.lstrip("<>=|"), "shape": list(a.shape), "offset": offset,
                      "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": ck.config, "tensors": table, "step": ck.step, "rng_state": ck.rng_state,
                         "meta": ck.meta}, sort_keys=True).encode()
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(chunks)


def decode(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if len(buf) < 12:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack("<II", buf[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(buf) < 12 + hlen:
        raise CheckpointError("truncated checkpoint header")
    head = json.loads(buf[12 : 12 + hlen].decode())
    base = 12 + hlen
    tensors = {}
    for t in head["tensors"]:
        start = base + t["offset"]
        if start + t["nbytes"] > len(buf):
            raise CheckpointError(f"truncated tensor {t['name']}")
        dt = np.dtype(t["dtype"]).newbyteorder("<")
        arr = np.frombuffer(buf, dtype=dt, count=t["nbytes"] // dt.itemsize, offset=start)
        tensors[t["name"]] = arr.astype(dt.newbyteorder("="), copy=True).reshape(t["shape"])
    return Checkpoint(head["config"], tensors, head["step"], head["rng_state"], head["meta"])


def save(path: os.PathLike, ck: Checkpoint) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(encode(ck))
    os.replace(tmp, path)


def load(path: os.PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        return decode(f.read())
