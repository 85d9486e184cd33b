"""
Versioned binary checkpoints.

Layout (all integers little-endian):

    b"ZIPC"                     magic
    uint32  version             currently 1
    uint32  metadata length     followed by that many bytes of JSON
    uint32  parameter count
    per parameter:
        uint16  name length, then the UTF-8 name
        uint8   ndim, then ndim x uint32 dims
        float32 values, row-major
"""
import io
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from rest_framework.parsers import JSONParser
from rest_framework.renderers import JSONRenderer

from apps.interleave.sequences import Modality
from apps.numeric.tensor import ShapeError

logger = logging.getLogger(__name__)

MAGIC = b"ZIPC"
VERSION = 1
VALUE_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    """Raised for unreadable checkpoints or ones that do not fit the model."""


@dataclass
class Checkpoint:
    metadata: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)

    def group(self, prefix):
        """Tensors under ``prefix/`` with the prefix stripped."""
        start = f"{prefix}/"
        return {name[len(start):]: value for name, value in self.tensors.items() if name.startswith(start)}


def _uint(value, dtype):
    return np.array([value], dtype=dtype).tobytes()


def encode_checkpoint(checkpoint):
    metadata = JSONRenderer().render(checkpoint.metadata)
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(_uint(VERSION, "<u4"))
    out.write(_uint(len(metadata), "<u4"))
    out.write(metadata)
    out.write(_uint(len(checkpoint.tensors), "<u4"))
    for name, value in checkpoint.tensors.items():
        encoded = name.encode("utf-8")
        value = np.asarray(value)
        out.write(_uint(len(encoded), "<u2"))
        out.write(encoded)
        out.write(_uint(value.ndim, "<u1"))
        out.write(np.asarray(value.shape, dtype="<u4").tobytes())
        out.write(np.ascontiguousarray(value, dtype=VALUE_DTYPE).tobytes())
    return out.getvalue()


class _Reader:

    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.offset}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def array(self, dtype, count):
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype, count=count)

    def uint(self, dtype):
        return int(self.array(dtype, 1)[0])


def decode_checkpoint(data):
    reader = _Reader(data)
    magic = reader.take(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = reader.uint("<u4")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}; this build reads version {VERSION}")
    metadata = JSONParser().parse(io.BytesIO(reader.take(reader.uint("<u4"))))
    tensors = {}
    for _ in range(reader.uint("<u4")):
        name = reader.take(reader.uint("<u2")).decode("utf-8")
        shape = tuple(int(d) for d in reader.array("<u4", reader.uint("<u1")))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = reader.array(VALUE_DTYPE, count).reshape(shape).astype(np.float32)
    if reader.offset != len(data):
        raise CheckpointError(f"{len(data) - reader.offset} trailing bytes after the parameter table")
    return Checkpoint(metadata, tensors)


def save_checkpoint(path, checkpoint):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(checkpoint))
    os.replace(tmp, path)
    logger.info(f"Saved checkpoint with {len(checkpoint.tensors)} tensors to {path}")
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return decode_checkpoint(path.read_bytes())


def apply_state(module, state):
    """Load ``state`` into ``module``; names the first parameter that does not fit."""
    own = dict(module.named_parameters())
    for name, p in own.items():
        if name not in state:
            raise CheckpointError(f"checkpoint has no parameter {name}")
        if tuple(state[name].shape) != tuple(p.shape):
            raise CheckpointError(f"parameter {name}: checkpoint shape {tuple(state[name].shape)}, model {p.shape}")
    extra = [name for name in state if name not in own]
    if extra:
        raise CheckpointError(f"checkpoint parameter {extra[0]} does not exist in the model")
    try:
        module.load_state_dict(state)
    except (KeyError, ShapeError) as e:
        raise CheckpointError(str(e)) from e


def load_tower_states(paths):
    """``{"A": path, "B": path}`` -> ``{Modality: weights}`` for pre-trained towers."""
    states = {}
    for key, path in (paths or {}).items():
        if not path:
            continue
        checkpoint = load_checkpoint(path)
        if checkpoint.metadata.get("format") != "tower":
            raise CheckpointError(f"{path} is not a tower checkpoint")
        if checkpoint.metadata.get("modality") != Modality(key).value:
            raise CheckpointError(f"{path} holds tower {checkpoint.metadata.get('modality')}, not {key}")
        states[Modality(key)] = checkpoint.group("model")
    return states


def tower_paths(paths):
    """Tower checkpoint paths keyed by the modality their metadata names."""
    resolved = {}
    for path in paths or ():
        checkpoint = load_checkpoint(path)
        if checkpoint.metadata.get("format") != "tower":
            raise CheckpointError(f"{path} is not a tower checkpoint")
        modality = checkpoint.metadata.get("modality")
        if modality in resolved:
            raise CheckpointError(f"two checkpoints for tower {modality}: {resolved[modality]} and {path}")
        resolved[modality] = str(path)
    return resolved
