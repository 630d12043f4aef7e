import numpy as np
import pytest

from mpcmin.model import Model, ModelConfig


def tiny_config(**kw) -> ModelConfig:
    base = dict(num_layers=2, heads=2, head_dim=2, ffn_dim=8, vocab=16, max_seq=16)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed: int = 0, **kw) -> Model:
    return Model.random(tiny_config(**kw), seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
