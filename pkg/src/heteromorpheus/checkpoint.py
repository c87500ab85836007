"""Versioned binary container for model parameters.

Layout (all integers little-endian)::

    magic       8 bytes   b"HMPOLICY"
    version     uint32
    header_len  uint32
    header      UTF-8 JSON {"config": ..., "tensors": n, "metadata": {...}}
    n times:
        name_len uint16, name (UTF-8), ndim uint8, dims uint32 * ndim,
        data float64 little-endian, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .model import ModelConfig, Parameters, parameter_shapes
from .tensor import Tensor

MAGIC = b"HMPOLICY"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: Parameters, config: ModelConfig, metadata: dict[str, Any] | None = None) -> bytes:
    expected = parameter_shapes(config)
    if set(expected) != set(params):
        raise CheckpointError("parameter names do not match the config")
    header = json.dumps({"config": config.to_dict(), "tensors": len(expected), "metadata": metadata or {}},
                        sort_keys=True).encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(header))
    out += header
    for name, shape in expected.items():
        arr = params[name].data
        if arr.shape != shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != {shape}")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint payload")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint_with_metadata(data: bytes, expected: ModelConfig | None = None
                                  ) -> tuple[Parameters, ModelConfig, dict[str, Any]]:
    r = _Reader(bytes(data))
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a policy checkpoint (bad magic)")
    version, header_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    try:
        header = json.loads(r.take(header_len).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from None
    shapes = parameter_shapes(config)
    if header.get("tensors") != len(shapes):
        raise CheckpointError(f"header declares {header.get('tensors')} tensors, config needs {len(shapes)}")
    if expected is not None:
        want = parameter_shapes(expected)
        if want != shapes:
            missing = len(set(want) ^ set(shapes))
            raise CheckpointError(
                f"checkpoint shapes disagree with the requested config "
                f"({len(shapes)} vs {len(want)} tensors, {missing} names differ)")
    params: Parameters = {}
    for name, shape in shapes.items():
        (name_len,) = r.unpack("<H")
        got = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = tuple(r.unpack(f"<{ndim}I")) if ndim else ()
        if got != name or dims != shape:
            raise CheckpointError(f"tensor {got!r} {dims} disagrees with config ({name!r} {shape})")
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after the last tensor")
    return params, config, header.get("metadata", {})


def load_checkpoint(data: bytes, expected: ModelConfig | None = None) -> tuple[Parameters, ModelConfig]:
    params, config, _ = load_checkpoint_with_metadata(data, expected)
    return params, config


def write_checkpoint(path: str | Path, params: Parameters, config: ModelConfig,
                     metadata: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.write_bytes(save_checkpoint(params, config, metadata))
    return path


def read_checkpoint(path: str | Path, expected: ModelConfig | None = None
                    ) -> tuple[Parameters, ModelConfig, dict[str, Any]]:
    return load_checkpoint_with_metadata(Path(path).read_bytes(), expected)
