import numpy as np
import pytest

from panelqa.encoder import ModelConfig
from panelqa.model import init_model
from panelqa.tensor import Rng, Tensor


def toy_config(**overrides) -> ModelConfig:
    base = dict(patch_size=4, token_dim=16, heads=2, encoder_depth=2,
                decoder_depth=1, panel_size=3, mlp_ratio=2.0, channels=3,
                crop_hw=12, variant="full")
    base.update(overrides)
    return ModelConfig(**base)


def toy_model(seed=0, **overrides):
    cfg = toy_config(**overrides)
    return init_model(cfg, Rng(seed), dtype=np.float64)


def rand_image(cfg: ModelConfig, rng: Rng) -> Tensor:
    return Tensor(rng.uniform((cfg.channels, cfg.crop_hw, cfg.crop_hw)))


@pytest.fixture
def cfg():
    return toy_config()


@pytest.fixture
def model():
    return toy_model(seed=0)
