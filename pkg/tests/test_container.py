import json
import struct

import numpy as np
import pytest

from ternmm.container import (
    MAGIC,
    TensorRecord,
    quantize_checkpoint,
    read_container,
    record_f32,
    record_i8,
    record_t2,
    write_container,
)
from ternmm.errors import FormatError
from ternmm.quant import pack_matrix


def roundtrip(tensors, meta=None):
    blob = write_container(tensors, meta or {})
    return read_container(blob), blob


def test_empty_container_is_header_only():
    blob = write_container({}, {})
    (header_len,) = struct.unpack("<Q", blob[8:16])
    assert len(blob) == 16 + header_len
    tensors, meta = read_container(blob)
    assert tensors == {}
    assert meta["format_version"] == 1


def test_single_f32_tensor_layout():
    blob = write_container({"w": record_f32(np.zeros((2, 2), np.float32))}, {})
    header = json.loads(blob[16 : 16 + struct.unpack("<Q", blob[8:16])[0]])
    ent = header["tensors"]["w"]
    assert ent == {"dtype": "f32", "nbytes": 16, "offset": 0, "shape": [2, 2]}


def test_t2_payload_size():
    p = pack_matrix(np.array([[1, 0, -1, 1, 0]], np.int8), 0.5)
    tensors = {
        "w": record_t2(p),
        "w.scale": record_f32(np.array(0.5, np.float32)),
    }
    blob = write_container(tensors, {})
    header = json.loads(blob[16 : 16 + struct.unpack("<Q", blob[8:16])[0]])
    assert header["tensors"]["w"]["nbytes"] == 2  # ceil(5/4) bytes, one row
    assert header["tensors"]["w.scale"]["nbytes"] == 4


def test_t2_without_scale_rejected():
    p = pack_matrix(np.array([[1]], np.int8), 1.0)
    with pytest.raises(FormatError, match="scale"):
        write_container({"w": record_t2(p)}, {})


def test_roundtrip_random_tensors():
    rng = np.random.default_rng(0)
    tensors = {}
    for i in range(100):
        kind = i % 3
        name = f"t{i:03d}"
        if kind == 0:
            tensors[name] = record_f32(rng.normal(size=(rng.integers(1, 5), rng.integers(1, 5))).astype(np.float32))
        elif kind == 1:
            tensors[name] = record_i8(rng.integers(-100, 100, size=(rng.integers(1, 9),)).astype(np.int8))
        else:
            o, k = int(rng.integers(1, 5)), int(rng.integers(1, 9))
            trits = rng.integers(-1, 2, (o, k)).astype(np.int8)
            tensors[name] = record_t2(pack_matrix(trits, 0.5))
            tensors[name + ".scale"] = record_f32(np.array(0.5, np.float32))
    (loaded, _meta), blob = roundtrip(tensors, {"config": {"x": 1}})
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert loaded[name].dtype == tensors[name].dtype
        assert loaded[name].shape == tensors[name].shape
        assert loaded[name].array.tobytes() == tensors[name].array.tobytes()


def test_serialization_determinism():
    rng = np.random.default_rng(1)
    tensors = {
        "b": record_f32(rng.normal(size=(3, 5)).astype(np.float32)),
        "a": record_i8(rng.integers(-5, 5, size=(7,)).astype(np.int8)),
    }
    blob = write_container(tensors, {"config": {"n": 2}})
    loaded, meta = read_container(blob)
    assert write_container(loaded, meta) == blob


def test_bad_magic():
    blob = bytearray(write_container({}, {}))
    blob[0] ^= 0xFF
    with pytest.raises(FormatError, match="magic"):
        read_container(bytes(blob))


def test_truncation():
    blob = write_container({"w": record_f32(np.ones((4, 4), np.float32))}, {})
    with pytest.raises(FormatError, match="truncated"):
        read_container(blob[:20])
    with pytest.raises(FormatError):
        read_container(blob[:-8])


def test_offset_past_eof_names_tensor():
    blob = write_container({"w": record_f32(np.ones((2, 2), np.float32))}, {})
    (header_len,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + header_len])
    header["tensors"]["w"]["offset"] = 1 << 20
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    doctored = MAGIC + struct.pack("<Q", len(raw)) + raw + blob[16 + header_len :]
    with pytest.raises(FormatError, match="'w'"):
        read_container(doctored)


def test_overlapping_ranges_rejected():
    a = record_f32(np.ones((2, 2), np.float32))
    blob = write_container({"a": a, "b": a}, {})
    (header_len,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + header_len])
    header["tensors"]["b"]["offset"] = 0  # collide with "a"
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    doctored = MAGIC + struct.pack("<Q", len(raw)) + raw + blob[16 + header_len :]
    with pytest.raises(FormatError, match="overlap"):
        read_container(doctored)


def test_unknown_dtype_rejected():
    blob = write_container({"w": record_f32(np.ones((1,), np.float32))}, {})
    (header_len,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + header_len])
    header["tensors"]["w"]["dtype"] = "f16"
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    doctored = MAGIC + struct.pack("<Q", len(raw)) + raw + blob[16 + header_len :]
    with pytest.raises(FormatError, match="dtype"):
        read_container(doctored)


def test_alignment():
    tensors = {
        "a": record_f32(np.ones((1,), np.float32)),
        "b": record_f32(np.ones((1,), np.float32)),
    }
    blob = write_container(tensors, {})
    (header_len,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + header_len])
    assert header["tensors"]["a"]["offset"] == 0
    assert header["tensors"]["b"]["offset"] == 64


class TestQuantizeCheckpoint:
    def tensors(self):
        rng = np.random.default_rng(2)
        return {
            "vision.blocks.0.attn.wq.weight": record_f32(rng.normal(size=(4, 4)).astype(np.float32)),
            "llm.blocks.3.ffn.gate.weight": record_f32(rng.normal(size=(8, 4)).astype(np.float32)),
            "llm.embed.weight": record_f32(rng.normal(size=(259, 4)).astype(np.float32)),
        }

    def test_vision_stays_f32_decoder_becomes_t2(self):
        out, meta, summary = quantize_checkpoint(self.tensors(), {})
        assert out["vision.blocks.0.attn.wq.weight"].dtype == "f32"
        assert out["llm.embed.weight"].dtype == "f32"
        assert out["llm.blocks.3.ffn.gate.weight"].dtype == "t2"
        assert out["llm.blocks.3.ffn.gate.weight.scale"].dtype == "f32"
        assert meta["config"]["pmap"]

    def test_dequantizes_to_beta_T(self):
        tensors = self.tensors()
        out, _, _ = quantize_checkpoint(tensors, {})
        from ternmm.quant import PackedTernaryMatrix, dequantize_weights, quantize_weights_absmean

        rec = out["llm.blocks.3.ffn.gate.weight"]
        beta = out["llm.blocks.3.ffn.gate.weight.scale"].array.item()
        packed = PackedTernaryMatrix(rows=8, cols=4, data=rec.array, scale=beta)
        trits, beta2 = quantize_weights_absmean(tensors["llm.blocks.3.ffn.gate.weight"].array)
        assert beta == pytest.approx(beta2)
        np.testing.assert_array_equal(
            dequantize_weights(packed), trits.astype(np.float32) * np.float32(beta2)
        )

    def test_16x_size_example(self):
        rng = np.random.default_rng(3)
        tensors = {"llm.blocks.0.attn.wq.weight": record_f32(rng.normal(size=(2048, 2048)).astype(np.float32))}
        out, _, summary = quantize_checkpoint(tensors, {})
        assert tensors["llm.blocks.0.attn.wq.weight"].nbytes == 16 * 1024 * 1024
        assert out["llm.blocks.0.attn.wq.weight"].nbytes == 1024 * 1024
        assert out["llm.blocks.0.attn.wq.weight.scale"].nbytes == 4

    def test_non_2d_ternary_match_rejected(self):
        tensors = {"llm.blocks.0.attn.wq.weight": record_f32(np.zeros((4,), np.float32))}
        with pytest.raises(FormatError, match="2-D"):
            quantize_checkpoint(tensors, {})

    def test_non_f32_input_rejected(self):
        tensors = {"x": record_i8(np.zeros((4,), np.int8))}
        with pytest.raises(FormatError, match="all-f32"):
            quantize_checkpoint(tensors, {})

    def test_requantization_trit_fixed_point(self):
        tensors = self.tensors()
        out1, meta1, _ = quantize_checkpoint(tensors, {})
        from ternmm.quant import PackedTernaryMatrix, dequantize_weights, unpack_trits

        rec = out1["llm.blocks.3.ffn.gate.weight"]
        beta = out1["llm.blocks.3.ffn.gate.weight.scale"].array.item()
        deq = dequantize_weights(PackedTernaryMatrix(8, 4, rec.array, beta))
        tensors2 = dict(tensors)
        tensors2["llm.blocks.3.ffn.gate.weight"] = record_f32(deq)
        out2, _, _ = quantize_checkpoint(tensors2, {})
        # trits are a fixed point of the dequantize -> requantize cycle
        assert (
            out2["llm.blocks.3.ffn.gate.weight"].array.tobytes()
            == rec.array.tobytes()
        )
        # absmean of beta*T is beta*mean(|T|) by definition
        trits = unpack_trits(rec.array, 8, 4)
        beta2 = out2["llm.blocks.3.ffn.gate.weight.scale"].array.item()
        assert beta2 == pytest.approx(beta * np.abs(trits).mean(), rel=1e-6)

    def test_quantize_deterministic_on_same_input(self):
        tensors = self.tensors()
        out1, meta1, _ = quantize_checkpoint(tensors, {})
        out2, meta2, _ = quantize_checkpoint(tensors, {})
        assert write_container(out1, meta1) == write_container(out2, meta2)
