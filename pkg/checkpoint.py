#!/usr/bin/env python3
"""
Binary checkpoint format.

Layout (little-endian):
    magic "SPNF" | version u32 | epoch u32 | record count u32
    per record: name length u32 | UTF-8 name | rank u32 | dims u32 * rank | float32 values

Records hold the parameters in registry order, then the batch-norm running
statistics, then the optimizer velocity under ``velocity/<parameter name>``.
"""

import logging
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from errors import CheckpointFormatError, CheckpointTruncatedError
from model_builder import SparseNet, build_network
from topology import NetworkSpec

logger = logging.getLogger(__name__)

MAGIC = b"SPNF"
VERSION = 1
VELOCITY_PREFIX = "velocity/"

_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    """Decoded checkpoint contents."""

    epoch: int
    tensors: "OrderedDict[str, np.ndarray]"
    velocity: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    version: int = VERSION


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    records = list(checkpoint.tensors.items()) + [
        (VELOCITY_PREFIX + name, value) for name, value in checkpoint.velocity.items()
    ]
    chunks = [MAGIC, _U32.pack(checkpoint.version), _U32.pack(checkpoint.epoch), _U32.pack(len(records))]
    for name, value in records:
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(value, dtype="<f4")
        chunks.append(_U32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U32.pack(array.ndim))
        chunks.extend(_U32.pack(dim) for dim in array.shape)
        chunks.append(array.tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = memoryview(data)
        self.offset = 0
        self.source = source

    def take(self, size: int, what: str) -> memoryview:
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointTruncatedError(
                f"{self.source}: truncated while reading {what} at byte {self.offset}"
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    reader = _Reader(data, source)
    if len(data) < len(MAGIC):
        raise CheckpointTruncatedError(f"{source}: file shorter than the header")
    magic = bytes(reader.take(len(MAGIC), "magic"))
    if magic != MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    version = reader.u32("version")
    if version != VERSION:
        raise CheckpointFormatError(f"{source}: unsupported version {version}, expected {VERSION}")
    epoch = reader.u32("epoch")
    count = reader.u32("record count")

    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    velocity: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for index in range(count):
        name_len = reader.u32(f"record {index} name length")
        try:
            name = bytes(reader.take(name_len, f"record {index} name")).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError(f"{source}: record {index} name is not UTF-8") from e
        rank = reader.u32(f"{name} rank")
        shape = tuple(reader.u32(f"{name} dim") for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = reader.take(4 * size, f"{name} values")
        value = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
        target = velocity if name.startswith(VELOCITY_PREFIX) else tensors
        key = name[len(VELOCITY_PREFIX):] if name.startswith(VELOCITY_PREFIX) else name
        if key in target:
            raise CheckpointFormatError(f"{source}: duplicate record {name}")
        target[key] = value
    if reader.offset != len(data):
        raise CheckpointFormatError(f"{source}: {len(data) - reader.offset} trailing bytes")
    return Checkpoint(epoch, tensors, velocity, version)


def write_atomic(path: Union[str, Path], payload: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def save_checkpoint(model: SparseNet, path: Union[str, Path], epoch: int = 0,
                    velocity: Optional[Dict[str, np.ndarray]] = None) -> None:
    """
    Save parameters, running statistics and optionally optimizer velocity.

    Args:
        model: Model to save
        path: Destination file, replaced atomically
        epoch: Training epoch recorded in the header
        velocity: Optimizer state keyed by parameter name
    """
    ordered_velocity: "OrderedDict[str, np.ndarray]" = OrderedDict()
    if velocity:
        for param in model.parameters():
            if param.name in velocity:
                ordered_velocity[param.name] = velocity[param.name]
    payload = encode_checkpoint(Checkpoint(epoch, model.state(), ordered_velocity))
    write_atomic(path, payload)
    logger.info(f"Saved checkpoint {path} (epoch {epoch}, {len(payload):,} bytes)")


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))


def load_checkpoint(path: Union[str, Path], spec: NetworkSpec) -> Tuple[SparseNet, Checkpoint]:
    """
    Build a model for ``spec`` and fill it from ``path``.

    Raises:
        CheckpointFormatError: bad magic or version
        CheckpointTruncatedError: file ends early
        CheckpointMismatchError: parameter names or shapes differ from the model built for ``spec``
    """
    checkpoint = read_checkpoint(path)
    model = build_network(spec, np.random.default_rng(0))
    model.load_state(checkpoint.tensors)
    logger.info(f"Loaded checkpoint {path} (epoch {checkpoint.epoch})")
    return model, checkpoint
