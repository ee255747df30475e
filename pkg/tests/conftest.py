import numpy as np
import pytest

from ternmm import container as cio
from ternmm.config import ModelConfig, toy_config
from ternmm.model import init_params, params_to_records


def make_f32_checkpoint(config: ModelConfig, seed: int = 0) -> bytes:
    params = init_params(config, seed=seed)
    return cio.write_container(params_to_records(params), {"config": config.to_dict()})


def make_quantized_checkpoint(config: ModelConfig, seed: int = 0) -> bytes:
    tensors, meta = cio.read_container(make_f32_checkpoint(config, seed))
    qtensors, qmeta, _ = cio.quantize_checkpoint(tensors, meta)
    return cio.write_container(qtensors, qmeta)


@pytest.fixture(scope="session")
def toy_cfg() -> ModelConfig:
    return toy_config()


@pytest.fixture(scope="session")
def toy_f32_bytes(toy_cfg) -> bytes:
    return make_f32_checkpoint(toy_cfg, seed=7)


@pytest.fixture(scope="session")
def toy_model_bytes(toy_cfg) -> bytes:
    tensors, meta = cio.read_container(make_f32_checkpoint(toy_cfg, seed=7))
    qtensors, qmeta, _ = cio.quantize_checkpoint(tensors, meta)
    return cio.write_container(qtensors, qmeta)


@pytest.fixture(scope="session")
def toy_model(toy_model_bytes):
    from ternmm.model import load_model

    return load_model(toy_model_bytes)


def random_packed(o: int, k: int, seed: int = 0, scale: float = 0.05):
    from ternmm.quant import pack_matrix

    rng = np.random.default_rng(seed)
    trits = rng.integers(-1, 2, size=(o, k)).astype(np.int8)
    return pack_matrix(trits, scale)
