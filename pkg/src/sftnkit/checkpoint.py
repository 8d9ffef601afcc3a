"""Versioned binary checkpoints for :class:`~sftnkit.blocknet.BlockNet`.

Layout (all integers little-endian)::

    b"SFTN"                    magic
    u32 version                currently 1
    u32 len + utf-8 JSON       architecture descriptor
    u32 tensor count
    per tensor:
        u16 len + utf-8 name
        u32 ndim, u32 * ndim   shape
        f32 * prod(shape)      payload
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from typing import BinaryIO

import numpy as np

from .blocknet import BlockNet

MAGIC = b"SFTN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_state(f: BinaryIO, descriptor: dict, state: dict[str, np.ndarray]) -> None:
    f.write(MAGIC)
    f.write(struct.pack("<I", VERSION))
    desc = json.dumps(descriptor, sort_keys=True, separators=(",", ":")).encode()
    f.write(struct.pack("<I", len(desc)))
    f.write(desc)
    f.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode()
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def checkpoint_bytes(net: BlockNet) -> bytes:
    buf = io.BytesIO()
    _write_state(buf, net.descriptor(), net.state_dict())
    return buf.getvalue()


def checkpoint_hash(net: BlockNet) -> str:
    return hashlib.sha256(checkpoint_bytes(net)).hexdigest()


def save_checkpoint(net: BlockNet, path: str | os.PathLike) -> str:
    """Write ``net`` to ``path`` and return the sha256 of the written bytes."""
    data = checkpoint_bytes(net)
    with open(path, "wb") as f:
        f.write(data)
    return hashlib.sha256(data).hexdigest()


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def read_checkpoint(f: BinaryIO) -> tuple[dict, dict[str, np.ndarray]]:
    magic = _read_exact(f, 4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (dlen,) = struct.unpack("<I", _read_exact(f, 4, "descriptor length"))
    descriptor = json.loads(_read_exact(f, dlen, "descriptor").decode())
    (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
        name = _read_exact(f, nlen, "name").decode()
        (ndim,) = struct.unpack("<I", _read_exact(f, 4, "ndim"))
        shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "shape"))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(_read_exact(f, 4 * n, f"payload of {name}"), dtype="<f4").reshape(shape)
        state[name] = arr.astype(np.float32)
    return descriptor, state


def load_checkpoint(path: str | os.PathLike, expect: dict | None = None) -> BlockNet:
    """Rebuild a BlockNet from ``path``.

    ``expect`` is an architecture descriptor the checkpoint must match.
    """
    with open(path, "rb") as f:
        descriptor, state = read_checkpoint(f)
    if expect is not None and _arch_key(expect) != _arch_key(descriptor):
        raise CheckpointError(
            f"architecture mismatch: checkpoint is {descriptor.get('name')!r}, expected {expect.get('name')!r}")
    net = BlockNet.from_descriptor(descriptor)
    net.load_state_dict(state)
    return net


def _arch_key(desc: dict) -> str:
    return json.dumps({k: desc[k] for k in ("num_classes", "input_shape", "blocks")}, sort_keys=True)
