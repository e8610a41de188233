"""Binary checkpoint format.

Layout (little-endian)::

    b"UICL"  u32 version=1
    u32 x 6  n_regions, hidden_dim, n_layers, n_heads, ref_dim, T
    f32[]    every tensor of parameter_shapes(config), in order, row-major
    u32      CRC32 of all preceding bytes
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError
from .model import ModelConfig, ModelParameters, parameter_shapes

MAGIC = b"UICL"
VERSION = 1
_HEADER = struct.Struct("<4sI6I")


def to_bytes(params: ModelParameters) -> bytes:
    cfg = params.config
    chunks = [_HEADER.pack(MAGIC, VERSION, *cfg.as_tuple())]
    for name, _ in parameter_shapes(cfg):
        chunks.append(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    body = b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(data: bytes, source="<bytes>"):
    if len(data) < _HEADER.size + 4:
        raise CheckpointFormatError(f"{source}: truncated checkpoint ({len(data)} bytes)")
    magic, version, *dims = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic {magic!r}, not a checkpoint")
    if version != VERSION:
        raise CheckpointFormatError(f"{source}: unsupported checkpoint version {version}")
    try:
        config = ModelConfig(*dims)
    except ValueError as exc:
        raise CheckpointFormatError(f"{source}: invalid configuration header {dims} ({exc})") from exc
    shapes = parameter_shapes(config)
    expected = _HEADER.size + 4 * sum(int(np.prod(s)) for _, s in shapes) + 4
    if len(data) != expected:
        kind = "truncated" if len(data) < expected else "oversized"
        raise CheckpointFormatError(f"{source}: {kind} checkpoint, {len(data)} bytes for config {dims} (expected {expected})")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if crc != zlib.crc32(data[:-4]):
        raise CheckpointFormatError(f"{source}: CRC mismatch, file is corrupted")
    tensors = {}
    offset = _HEADER.size
    for name, shape in shapes:
        size = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(shape)
        tensors[name] = arr.astype(np.float32)
        offset += 4 * size
    return ModelParameters(config, tensors), config


def save_checkpoint(params: ModelParameters, config: ModelConfig, path) -> None:
    if config != params.config:
        raise CheckpointFormatError(f"config {config} does not match the parameters' {params.config}")
    if not all(np.all(np.isfinite(a)) for _, a in params.items()):
        raise CheckpointFormatError("refusing to save non-finite parameters")
    Path(path).write_bytes(to_bytes(params))


def load_checkpoint(path):
    """Return ``(ModelParameters, ModelConfig)``; parameters come back as float32."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"{path}: cannot read ({exc})") from exc
    return from_bytes(data, source=str(path))


def verify_checkpoint(path) -> bool:
    try:
        load_checkpoint(path)
    except CheckpointFormatError:
        return False
    return True
