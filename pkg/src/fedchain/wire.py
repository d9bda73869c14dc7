"""Binary layouts shared by the envelope, the ledger bodies and the protocol.

Model record ("FLMW"), all integers little-endian::

    b"FLMW" | version u16 | layer_count u16
    per layer: rows u32 | cols u32 | rows*cols f64 (row-major) | cols f64 (bias)
    client_id u16 | round_id u64 | sample_count u64
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import SerializationError
from .model import DenseLayer, ModelWeights

MAGIC = b"FLMW"
MODEL_VERSION = 1
SERVER_CLIENT_ID = 0xFFFF  # client_id carried by server-authored (global) models

_HEADER = struct.Struct("<4sHH")
_LAYER = struct.Struct("<II")
_TRAILER = struct.Struct("<HQQ")
_F64 = np.dtype("<f8")


@dataclass(frozen=True)
class ModelMetadata:
    client_id: int
    round_id: int
    sample_count: int


def serialize_model(model: ModelWeights, meta: ModelMetadata) -> bytes:
    try:
        parts = [_HEADER.pack(MAGIC, MODEL_VERSION, model.layer_count)]
        for layer in model.layers:
            rows, cols = layer.weight.shape
            parts.append(_LAYER.pack(rows, cols))
            parts.append(np.ascontiguousarray(layer.weight, dtype=_F64).tobytes())
            parts.append(np.ascontiguousarray(layer.bias, dtype=_F64).tobytes())
        parts.append(_TRAILER.pack(meta.client_id, meta.round_id, meta.sample_count))
    except struct.error as exc:
        raise SerializationError(f"cannot serialize model: {exc}") from exc
    return b"".join(parts)


def deserialize_model(data: bytes) -> tuple[ModelWeights, ModelMetadata]:
    model, meta, end = read_model(data, 0)
    if end != len(data):
        raise SerializationError(f"{len(data) - end} trailing bytes after model record")
    return model, meta


def read_model(data: bytes, offset: int) -> tuple[ModelWeights, ModelMetadata, int]:
    """Parse one FLMW record starting at ``offset``; returns the end offset too."""
    view = memoryview(data)
    try:
        magic, version, count = _HEADER.unpack_from(view, offset)
        if magic != MAGIC:
            raise SerializationError(f"bad magic {magic!r}")
        if version != MODEL_VERSION:
            raise SerializationError(f"unsupported model version {version}")
        if count == 0:
            raise SerializationError("model record has no layers")
        pos = offset + _HEADER.size
        layers = []
        for _ in range(count):
            rows, cols = _LAYER.unpack_from(view, pos)
            pos += _LAYER.size
            n_w = rows * cols * 8
            n_b = cols * 8
            if rows == 0 or cols == 0 or pos + n_w + n_b > len(data):
                raise SerializationError("layer block truncated or empty")
            w = np.frombuffer(view[pos:pos + n_w], dtype=_F64).reshape(rows, cols).astype(np.float64)
            pos += n_w
            b = np.frombuffer(view[pos:pos + n_b], dtype=_F64).astype(np.float64)
            pos += n_b
            layers.append(DenseLayer(w, b))
        client_id, round_id, sample_count = _TRAILER.unpack_from(view, pos)
        pos += _TRAILER.size
    except struct.error as exc:
        raise SerializationError(f"truncated model record: {exc}") from exc
    try:
        model = ModelWeights(layers)
    except ValueError as exc:
        raise SerializationError(str(exc)) from exc
    return model, ModelMetadata(client_id, round_id, sample_count), pos
