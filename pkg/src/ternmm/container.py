"""Bit-exact named-tensor container format.

Layout:
  bytes 0..7    magic "TERNMM01"
  bytes 8..15   u64 little-endian header length H
  bytes 16..16+H UTF-8 JSON header, keys sorted lexicographically, no
                insignificant whitespace:
                {"meta": {"format_version": 1, "config": {...}, ...},
                 "tensors": {name: {"dtype": "f32"|"i8"|"t2",
                                    "shape": [...], "offset": n,
                                    "nbytes": n}}}
  data section  starts at 16+H; each tensor 64-byte aligned, offsets
                relative to the data-section start, laid out in
                lexicographic name order, gaps zero-filled.

Every t2 tensor "X" is an [O, K] packed trit payload of O*ceil(K/4)
bytes with an f32 scalar companion "X.scale". Rewriting the same inputs
yields byte-identical files.
"""

from __future__ import annotations

import fnmatch
import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .quant import (
    PackedTernaryMatrix,
    bytes_per_row,
    pack_trits,
    quantize_weights_absmean,
)

MAGIC = b"TERNMM01"
ALIGN = 64
FORMAT_VERSION = 1
DTYPES = ("f32", "i8", "t2")


@dataclass
class TensorRecord:
    dtype: str
    shape: tuple[int, ...]
    array: np.ndarray  # f32 / i8 values, or uint8 packed rows for t2

    @property
    def nbytes(self) -> int:
        return _payload_nbytes(self.dtype, self.shape)


def _payload_nbytes(dtype: str, shape: tuple[int, ...]) -> int:
    if dtype == "f32":
        return 4 * math.prod(shape)
    if dtype == "i8":
        return math.prod(shape)
    if dtype == "t2":
        o, k = shape
        return o * bytes_per_row(k)
    raise FormatError(f"unknown dtype {dtype!r}")


def _contiguous(array: np.ndarray, dtype) -> np.ndarray:
    a = np.asarray(array, dtype=dtype)
    if a.ndim and not a.flags["C_CONTIGUOUS"]:
        a = np.ascontiguousarray(a)
    return a


def record_f32(array: np.ndarray) -> TensorRecord:
    a = _contiguous(array, np.float32)  # 0-d stays 0-d: scalar shape is []
    return TensorRecord("f32", tuple(a.shape), a)


def record_i8(array: np.ndarray) -> TensorRecord:
    a = _contiguous(array, np.int8)
    return TensorRecord("i8", tuple(a.shape), a)


def record_t2(packed: PackedTernaryMatrix) -> TensorRecord:
    return TensorRecord("t2", (packed.rows, packed.cols), packed.data)


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def write_container(tensors: dict[str, TensorRecord], meta: dict) -> bytes:
    """Serialize to bytes; layout is deterministic in the tensor names."""
    names = sorted(tensors)
    for name in names:
        rec = tensors[name]
        if rec.dtype not in DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype {rec.dtype!r}")
        if rec.dtype == "t2":
            if len(rec.shape) != 2:
                raise FormatError(f"tensor {name!r}: t2 payloads must be 2-D")
            scale_name = name + ".scale"
            scale = tensors.get(scale_name)
            if scale is None or scale.dtype != "f32" or math.prod(scale.shape) != 1:
                raise FormatError(f"t2 tensor {name!r} lacks f32 scalar {scale_name!r}")

    header_tensors = {}
    offset = 0
    for name in names:
        rec = tensors[name]
        nbytes = rec.nbytes
        start = _align(offset)
        header_tensors[name] = {
            "dtype": rec.dtype,
            "shape": list(rec.shape),
            "offset": start,
            "nbytes": nbytes,
        }
        offset = start + nbytes

    full_meta = {"format_version": FORMAT_VERSION, **meta}
    header = json.dumps(
        {"meta": full_meta, "tensors": header_tensors},
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=True,
    ).encode("utf-8")

    data = bytearray(offset)
    for name in names:
        rec = tensors[name]
        ent = header_tensors[name]
        raw = rec.array.tobytes()
        if len(raw) != ent["nbytes"]:
            raise FormatError(
                f"tensor {name!r}: payload {len(raw)} bytes != declared {ent['nbytes']}"
            )
        data[ent["offset"] : ent["offset"] + ent["nbytes"]] = raw

    return MAGIC + struct.pack("<Q", len(header)) + header + bytes(data)


def read_container(source) -> tuple[dict[str, TensorRecord], dict]:
    """Parse and validate a container; exact inverse of write_container."""
    if isinstance(source, (bytes, bytearray)):
        buf = bytes(source)
    else:
        with open(source, "rb") as f:
            buf = f.read()
    if len(buf) < 16:
        raise FormatError(f"container truncated: {len(buf)} bytes, need >= 16")
    if buf[:8] != MAGIC:
        raise FormatError(f"bad magic {buf[:8]!r}, expected {MAGIC!r}")
    (header_len,) = struct.unpack("<Q", buf[8:16])
    if 16 + header_len > len(buf):
        raise FormatError(
            f"container truncated: header claims {header_len} bytes past end of file"
        )
    try:
        header = json.loads(buf[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable container header: {e}") from e
    if not isinstance(header, dict) or "tensors" not in header or "meta" not in header:
        raise FormatError("container header missing 'tensors'/'meta'")
    meta = header["meta"]
    data = buf[16 + header_len :]

    spans = []
    tensors: dict[str, TensorRecord] = {}
    for name, ent in header["tensors"].items():
        dtype = ent.get("dtype")
        if dtype not in DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype {dtype!r}")
        shape = tuple(int(s) for s in ent["shape"])
        offset = int(ent["offset"])
        nbytes = int(ent["nbytes"])
        if any(s < 0 for s in shape):
            raise FormatError(f"tensor {name!r}: negative dimension in {shape}")
        expected = _payload_nbytes(dtype, shape)
        if nbytes != expected:
            raise FormatError(
                f"tensor {name!r}: nbytes {nbytes} != {expected} implied by {dtype} {shape}"
            )
        if offset < 0 or offset + nbytes > len(data):
            raise FormatError(
                f"tensor {name!r}: byte range [{offset}, {offset + nbytes}) "
                f"outside data section of {len(data)} bytes"
            )
        if offset % ALIGN:
            raise FormatError(f"tensor {name!r}: offset {offset} not {ALIGN}-byte aligned")
        spans.append((offset, offset + nbytes, name))
        raw = data[offset : offset + nbytes]
        if dtype == "f32":
            arr = np.frombuffer(raw, dtype=np.float32).reshape(shape).copy()
        elif dtype == "i8":
            arr = np.frombuffer(raw, dtype=np.int8).reshape(shape).copy()
        else:
            o, k = shape
            arr = np.frombuffer(raw, dtype=np.uint8).reshape(o, bytes_per_row(k)).copy()
        tensors[name] = TensorRecord(dtype, shape, arr)

    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise FormatError(f"tensors {n0!r} and {n1!r} overlap in the data section")

    for name, rec in tensors.items():
        if rec.dtype == "t2":
            scale = tensors.get(name + ".scale")
            if scale is None or scale.dtype != "f32" or math.prod(scale.shape) != 1:
                raise FormatError(f"t2 tensor {name!r} lacks f32 scalar {name + '.scale'!r}")

    return tensors, meta


def write_container_file(path, tensors: dict[str, TensorRecord], meta: dict) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    payload = write_container(tensors, meta)
    write_bytes_atomic(path, payload)


def write_bytes_atomic(path, payload: bytes) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def match_precision(name: str, pmap: list[tuple[str, str]]) -> str:
    """First-match wins over the ordered glob rules; default dense."""
    for pattern, kind in pmap:
        if fnmatch.fnmatchcase(name, pattern):
            if kind not in ("ternary", "dense"):
                raise FormatError(f"precision rule {pattern!r}: unknown kind {kind!r}")
            return kind
    return "dense"


def quantize_checkpoint(
    tensors: dict[str, TensorRecord],
    meta: dict,
    pmap: list[tuple[str, str]] | None = None,
) -> tuple[dict[str, TensorRecord], dict, list[dict]]:
    """Ternarize every pmap-matched tensor; copy the rest verbatim.

    Returns (tensors, meta, per-tensor summary rows). Input must be
    all-f32; matching a non-2-D tensor with a ternary rule is an error.
    """
    if pmap is None:
        cfg = meta.get("config", {})
        pmap = [tuple(r) for r in cfg.get("pmap", [])] or None
    if pmap is None:
        from .config import DEFAULT_PMAP

        pmap = list(DEFAULT_PMAP)

    for name, rec in tensors.items():
        if rec.dtype != "f32":
            raise FormatError(f"quantize input must be all-f32; {name!r} is {rec.dtype}")

    out: dict[str, TensorRecord] = {}
    summary: list[dict] = []
    for name in sorted(tensors):
        rec = tensors[name]
        kind = match_precision(name, pmap)
        if kind == "ternary":
            if len(rec.shape) != 2:
                raise FormatError(
                    f"ternary rule matches {name!r} but its shape {rec.shape} is not 2-D"
                )
            trits, beta = quantize_weights_absmean(rec.array)
            packed = pack_trits(trits)
            out[name] = TensorRecord("t2", rec.shape, packed)
            out[name + ".scale"] = record_f32(np.array(beta, dtype=np.float32))
            new_bytes = out[name].nbytes + 4
            summary.append(
                {
                    "name": name,
                    "kind": "ternary",
                    "f32_bytes": rec.nbytes,
                    "new_bytes": new_bytes,
                    "ratio": rec.nbytes / new_bytes,
                }
            )
        else:
            out[name] = rec
            summary.append(
                {
                    "name": name,
                    "kind": "dense",
                    "f32_bytes": rec.nbytes,
                    "new_bytes": rec.nbytes,
                    "ratio": 1.0,
                }
            )
    new_meta = dict(meta)
    cfg = dict(new_meta.get("config", {}))
    cfg["pmap"] = [list(r) for r in pmap]
    new_meta["config"] = cfg
    return out, new_meta, summary
