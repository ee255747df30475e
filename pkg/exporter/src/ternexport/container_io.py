"""Writer/reader for the engine's named-tensor container format.

Normative layout (shared with the inference engine):
  "TERNMM01" magic, u64 LE header length, canonical JSON header
  ({"meta": ..., "tensors": {name: {dtype, shape, offset, nbytes}}},
  keys sorted, no whitespace), then the data section with tensors laid
  out in lexicographic name order at 64-byte-aligned offsets relative
  to the data-section start. The exporter only ever emits f32 payloads.
"""

from __future__ import annotations

import json
import math
import struct

import numpy as np

MAGIC = b"TERNMM01"
ALIGN = 64


class ContainerError(Exception):
    pass


def write_f32_container(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    names = sorted(tensors)
    header_tensors = {}
    offset = 0
    for name in names:
        arr = tensors[name]
        if arr.dtype != np.float32:
            raise ContainerError(f"tensor {name!r}: exporter only writes f32, got {arr.dtype}")
        nbytes = 4 * arr.size
        start = (offset + ALIGN - 1) // ALIGN * ALIGN
        header_tensors[name] = {
            "dtype": "f32",
            "shape": list(arr.shape),
            "offset": start,
            "nbytes": nbytes,
        }
        offset = start + nbytes
    header = json.dumps(
        {"meta": {"format_version": 1, **meta}, "tensors": header_tensors},
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=True,
    ).encode("utf-8")
    data = bytearray(offset)
    for name in names:
        ent = header_tensors[name]
        raw = np.ascontiguousarray(tensors[name]).tobytes()
        data[ent["offset"] : ent["offset"] + ent["nbytes"]] = raw
    return MAGIC + struct.pack("<Q", len(header)) + header + bytes(data)


def read_container(path_or_bytes) -> tuple[dict[str, dict], bytes, dict]:
    """Parse header and return (tensor entries, data section, meta).

    Payload decoding is left to the caller; verify only needs f32.
    """
    if isinstance(path_or_bytes, (bytes, bytearray)):
        buf = bytes(path_or_bytes)
    else:
        with open(path_or_bytes, "rb") as f:
            buf = f.read()
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise ContainerError(f"not a container (magic {buf[:8]!r})")
    (header_len,) = struct.unpack("<Q", buf[8:16])
    if 16 + header_len > len(buf):
        raise ContainerError("container truncated inside the header")
    header = json.loads(buf[16 : 16 + header_len].decode("utf-8"))
    return header["tensors"], buf[16 + header_len :], header["meta"]


def read_f32_tensor(entries: dict, data: bytes, name: str) -> np.ndarray:
    ent = entries[name]
    if ent["dtype"] != "f32":
        raise ContainerError(f"tensor {name!r} is {ent['dtype']}, expected f32")
    raw = data[ent["offset"] : ent["offset"] + ent["nbytes"]]
    if len(raw) != ent["nbytes"]:
        raise ContainerError(f"tensor {name!r} payload truncated")
    return np.frombuffer(raw, dtype=np.float32).reshape([int(s) for s in ent["shape"]])


def expected_model_tensors(config: dict) -> dict[str, tuple[int, ...]]:
    """Every tensor name/shape the engine's loader requires for a config.

    Mirrors the engine's documented naming scheme; this is part of the
    container interface, not a code dependency.
    """
    v, p, d = config["vision"], config["projector"], config["decoder"]
    req: dict[str, tuple[int, ...]] = {}
    patch = int(v.get("patch", 14))
    image_size = int(v.get("image_size", 224))
    n_patches = (image_size * image_size) // (patch * patch)

    req["vision.patch_proj.weight"] = (v["d"], 3 * patch * patch)
    req["vision.patch_proj.bias"] = (v["d"],)
    req["vision.pos_embed"] = (n_patches, v["d"])
    for i in range(v["layers"]):
        pre = f"vision.blocks.{i}"
        req[f"{pre}.ln1.gain"] = (v["d"],)
        req[f"{pre}.ln1.bias"] = (v["d"],)
        for w in ("wq", "wk", "wv", "wo"):
            req[f"{pre}.attn.{w}.weight"] = (v["d"], v["d"])
            req[f"{pre}.attn.{w}.bias"] = (v["d"],)
        req[f"{pre}.ln2.gain"] = (v["d"],)
        req[f"{pre}.ln2.bias"] = (v["d"],)
        req[f"{pre}.ffn.fc1.weight"] = (v["mlp_hidden"], v["d"])
        req[f"{pre}.ffn.fc1.bias"] = (v["mlp_hidden"],)
        req[f"{pre}.ffn.fc2.weight"] = (v["d"], v["mlp_hidden"])
        req[f"{pre}.ffn.fc2.bias"] = (v["d"],)
    req["vision.final_norm.gain"] = (v["d"],)
    req["vision.final_norm.bias"] = (v["d"],)

    req["projector.fc1.weight"] = (p["hidden"], p["d_in"])
    req["projector.fc1.bias"] = (p["hidden"],)
    req["projector.fc2.weight"] = (p["d_out"], p["hidden"])
    req["projector.fc2.bias"] = (p["d_out"],)

    attn_dim = d["heads"] * d["head_dim"]
    req["llm.embed.weight"] = (d["vocab"], d["d"])
    for i in range(d["layers"]):
        pre = f"llm.blocks.{i}"
        req[f"{pre}.attn_norm.gain"] = (d["d"],)
        req[f"{pre}.attn.wq.weight"] = (attn_dim, d["d"])
        req[f"{pre}.attn.wk.weight"] = (attn_dim, d["d"])
        req[f"{pre}.attn.wv.weight"] = (attn_dim, d["d"])
        req[f"{pre}.attn.wo.weight"] = (d["d"], attn_dim)
        req[f"{pre}.ffn_norm.gain"] = (d["d"],)
        req[f"{pre}.ffn.gate.weight"] = (d["ffn_hidden"], d["d"])
        req[f"{pre}.ffn.up.weight"] = (d["ffn_hidden"], d["d"])
        req[f"{pre}.ffn.down.weight"] = (d["d"], d["ffn_hidden"])
    req["llm.final_norm.gain"] = (d["d"],)
    return req
