import numpy as np
import pytest
import torch

from cluegaze import dataio, engine, synthgen


@pytest.fixture(autouse=True)
def _fixed_torch_state():
    torch.manual_seed(0)
    yield


@pytest.fixture
def tiny_synth_cfg():
    return synthgen.SynthConfig(seed=7, T=5, image_size=64)


@pytest.fixture
def tiny_manifest(tmp_path, tiny_synth_cfg):
    path = synthgen.generate_dataset(tiny_synth_cfg, 3, tmp_path / "data")
    return dataio.load_manifest(path)


@pytest.fixture
def toy_model():
    return engine.build_model(engine.ModelConfig.toy(num_stages=2), seed=0)


def random_unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)
