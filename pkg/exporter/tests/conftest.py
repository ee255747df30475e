import json
import struct

import numpy as np
import pytest

from ternexport.container_io import expected_model_tensors

_ST_TAG = {np.float32: "F32", np.float16: "F16", np.float64: "F64"}


def write_safetensors(path, tensors: dict[str, np.ndarray], bf16: set[str] = frozenset()):
    """Minimal safetensors writer for test fixtures."""
    header = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name]
        if name in bf16:
            # upper 16 bits of the f32 pattern
            raw = (arr.astype(np.float32).view(np.uint32) >> 16).astype(np.uint16).tobytes()
            tag = "BF16"
        else:
            raw = arr.tobytes()
            tag = _ST_TAG[arr.dtype.type]
        header[name] = {
            "dtype": tag,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        blobs.append(raw)
        offset += len(raw)
    payload = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        for raw in blobs:
            f.write(raw)


def toy_engine_config() -> dict:
    return {
        "vision": {"layers": 2, "d": 16, "heads": 2, "mlp_hidden": 64, "patch": 14, "image_size": 28},
        "projector": {"d_in": 16, "hidden": 32, "d_out": 32},
        "decoder": {
            "layers": 2, "d": 32, "heads": 2, "head_dim": 16, "ffn_hidden": 64,
            "vocab": 259, "max_context": 256, "rope_base": 10000.0,
        },
    }


def toy_mapping_rules() -> list[dict]:
    t, c = {"transpose": True}, {"cast": True}
    return [
        {"source": "src.vision.patch_proj.weight", "dest": "vision.patch_proj.weight", **t},
        {"source": "src.vision.patch_proj.bias", "dest": "vision.patch_proj.bias"},
        {"source": "src.vision.pos_embed", "dest": "vision.pos_embed"},
        {"source": "src.vision.blocks.*.ln*.gain", "dest": "vision.blocks.*.ln*.gain"},
        {"source": "src.vision.blocks.*.ln*.bias", "dest": "vision.blocks.*.ln*.bias"},
        {"source": "src.vision.blocks.*.attn.*.weight", "dest": "vision.blocks.*.attn.*.weight", **t},
        {"source": "src.vision.blocks.*.attn.*.bias", "dest": "vision.blocks.*.attn.*.bias"},
        {"source": "src.vision.blocks.*.ffn.*.weight", "dest": "vision.blocks.*.ffn.*.weight", **t},
        {"source": "src.vision.blocks.*.ffn.*.bias", "dest": "vision.blocks.*.ffn.*.bias"},
        {"source": "src.vision.final_norm.gain", "dest": "vision.final_norm.gain"},
        {"source": "src.vision.final_norm.bias", "dest": "vision.final_norm.bias"},
        {"source": "src.projector.*.weight", "dest": "projector.*.weight", **t, **c},
        {"source": "src.projector.*.bias", "dest": "projector.*.bias"},
        {"source": "src.llm.embed.weight", "dest": "llm.embed.weight"},
        {"source": "src.llm.blocks.*.attn.*.weight", "dest": "llm.blocks.*.attn.*.weight", **t, **c},
        {"source": "src.llm.blocks.*.ffn.*.weight", "dest": "llm.blocks.*.ffn.*.weight", **t, **c},
        {"source": "src.llm.blocks.*.*.gain", "dest": "llm.blocks.*.*.gain"},
        {"source": "src.llm.final_norm.gain", "dest": "llm.final_norm.gain"},
    ]


def _stored_transposed(name: str) -> bool:
    return name.endswith(".weight") and name != "llm.embed.weight"


def make_foreign_checkpoint(out_dir, config: dict, seed: int = 0):
    """Two safetensors shards with foreign names, transposed weight
    layouts, one F16 and one BF16 tensor."""
    rng = np.random.default_rng(seed)
    required = expected_model_tensors(config)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in required.items():
        if name.endswith(".gain"):
            arr = np.ones(shape, np.float32)
        else:
            arr = rng.normal(0, 0.02, shape).astype(np.float32)
        if _stored_transposed(name) and len(shape) == 2:
            arr = np.ascontiguousarray(arr.T)
        tensors["src." + name] = arr
    tensors["src.projector.fc1.weight"] = tensors["src.projector.fc1.weight"].astype(np.float16)
    bf16 = {"src.llm.blocks.0.ffn.gate.weight"}
    names = sorted(tensors)
    half = len(names) // 2
    write_safetensors(
        out_dir / "model-00001.safetensors",
        {n: tensors[n] for n in names[:half]},
        bf16=bf16,
    )
    write_safetensors(
        out_dir / "model-00002.safetensors",
        {n: tensors[n] for n in names[half:]},
        bf16=bf16,
    )
    return tensors


@pytest.fixture()
def foreign(tmp_path):
    config = toy_engine_config()
    source_dir = tmp_path / "hub"
    source_dir.mkdir()
    tensors = make_foreign_checkpoint(source_dir, config, seed=3)
    mapping_path = tmp_path / "mapping.json"
    mapping_path.write_text(json.dumps(toy_mapping_rules(), indent=1))
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config))
    return {
        "config": config,
        "config_path": config_path,
        "source_dir": source_dir,
        "mapping_path": mapping_path,
        "tensors": tensors,
        "tmp": tmp_path,
    }
