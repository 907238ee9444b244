import numpy as np
import pytest

from fedinv.vit import ViTConfig, ViTParams


@pytest.fixture
def tiny_config():
    """Smallest nontrivial model: 8x8 image, 4 patches, 1 layer, 3 classes."""
    return ViTConfig(image_size=8, channels=1, patch_size=4, embed_dim=8,
                     num_heads=2, num_layers=1, mlp_ratio=2, num_classes=3)


@pytest.fixture
def tiny_params(tiny_config):
    return ViTParams.init(tiny_config, seed=7)


@pytest.fixture
def toy_config():
    """The default desk-scale model: 16x16, 16 patches, 2 layers."""
    return ViTConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
