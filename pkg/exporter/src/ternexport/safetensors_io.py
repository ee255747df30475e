"""Minimal safetensors reader.

Format: u64 little-endian header length, UTF-8 JSON header mapping
tensor names to {"dtype", "shape", "data_offsets": [begin, end]}
(offsets relative to the byte after the header), then the data block.
Only the float dtypes the exporter can cast are supported.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np


class SafetensorsError(Exception):
    pass


_NUMPY_DTYPES = {"F32": np.float32, "F64": np.float64, "F16": np.float16}


@dataclass
class SourceTensor:
    dtype: str  # safetensors dtype tag
    shape: tuple[int, ...]
    array: np.ndarray  # decoded values, original precision (BF16 held as f32)


def _decode(dtype: str, raw: bytes, shape: tuple[int, ...]) -> np.ndarray:
    if dtype in _NUMPY_DTYPES:
        return np.frombuffer(raw, dtype=_NUMPY_DTYPES[dtype]).reshape(shape)
    if dtype == "BF16":
        u16 = np.frombuffer(raw, dtype=np.uint16).astype(np.uint32) << 16
        return u16.view(np.float32).reshape(shape)
    raise SafetensorsError(f"unsupported safetensors dtype {dtype!r}")


def read_safetensors(path) -> dict[str, SourceTensor]:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 8:
        raise SafetensorsError(f"{path}: truncated file ({len(buf)} bytes)")
    (header_len,) = struct.unpack("<Q", buf[:8])
    if 8 + header_len > len(buf):
        raise SafetensorsError(f"{path}: header length {header_len} past end of file")
    try:
        header = json.loads(buf[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SafetensorsError(f"{path}: bad header: {e}") from e
    data = buf[8 + header_len :]
    tensors: dict[str, SourceTensor] = {}
    for name, ent in header.items():
        if name == "__metadata__":
            continue
        shape = tuple(int(s) for s in ent["shape"])
        begin, end = ent["data_offsets"]
        if not (0 <= begin <= end <= len(data)):
            raise SafetensorsError(f"{path}: tensor {name!r} offsets out of bounds")
        arr = _decode(ent["dtype"], data[begin:end], shape)
        tensors[name] = SourceTensor(dtype=ent["dtype"], shape=shape, array=arr)
    return tensors


def read_source_dir(source_dir) -> dict[str, SourceTensor]:
    """Union of every *.safetensors file in a directory."""
    files = sorted(
        os.path.join(source_dir, f)
        for f in os.listdir(source_dir)
        if f.endswith(".safetensors")
    )
    if not files:
        raise SafetensorsError(f"no .safetensors files under {source_dir}")
    merged: dict[str, SourceTensor] = {}
    for path in files:
        for name, tensor in read_safetensors(path).items():
            if name in merged:
                raise SafetensorsError(f"tensor {name!r} appears in multiple shards")
            merged[name] = tensor
    return merged
