"""Binary checkpoint container.

Layout, all integers little-endian::

    8 bytes   magic b"DSQNCKPT"
    u32       format version
    u64       header length in bytes
    ...       UTF-8 JSON header
    ...       tensor payloads, float32 little-endian, concatenated in the
              order of header["tensors"]

The header carries ``tensors`` (list of ``{"name", "shape"}``) plus free-form
``meta`` (network spec echo, counters, RNG states). Every tensor is stored
as float32 whatever the compute dtype; integer-valued arrays (actions, done
flags) are exact in float32 below 2**24.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import BadMagicError, ShapeMismatchError, TruncatedCheckpointError, VersionMismatchError

MAGIC = b"DSQNCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class CheckpointState:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, state: CheckpointState, version: int = VERSION):
    names = list(state.tensors)
    header = {
        "tensors": [{"name": n, "shape": list(np.shape(state.tensors[n]))} for n in names],
        "meta": state.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, version, len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(state.tensors[n], dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path, expected_shapes: dict | None = None) -> CheckpointState:
    """Read a checkpoint; nothing is returned unless the whole file validates.

    ``expected_shapes`` (name -> shape) turns shape disagreements into
    ``ShapeMismatchError``.
    """
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _PREFIX.size:
        if not MAGIC.startswith(data[:8]):
            raise BadMagicError(f"{path}: not a checkpoint file")
        raise TruncatedCheckpointError(f"{path}: file ends inside the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this reader supports {VERSION}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise TruncatedCheckpointError(f"{path}: file ends inside the header")
    header = json.loads(data[start : start + hlen].decode("utf-8"))
    offset = start + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if len(data) < end:
            raise TruncatedCheckpointError(f"{path}: payload for {entry['name']!r} is truncated")
        tensors[entry["name"]] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset = end
    if offset != len(data):
        raise TruncatedCheckpointError(f"{path}: {len(data) - offset} trailing bytes after the declared payload")
    for name, shape in (expected_shapes or {}).items():
        if name not in tensors or tensors[name].shape != tuple(shape):
            got = tensors[name].shape if name in tensors else None
            raise ShapeMismatchError(f"{path}: tensor {name!r} has shape {got}, expected {tuple(shape)}")
    return CheckpointState(tensors, header["meta"])
