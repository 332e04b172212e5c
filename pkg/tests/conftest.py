import numpy as np
import pytest
import torch

from slicesr.core import Volume
from slicesr.model import ModelConfig

torch.set_num_threads(1)

# small enough that a training step takes milliseconds
TINY = ModelConfig(encoder_channels=(4, 8), blocks_per_stage=1, feature_dim=8, coord_frequencies=2,
                   decoder_widths=(16, 1))


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def lr_volume(rng):
    return Volume(rng.random((24, 20, 6)), (1.0, 1.0, 4.0), "lr-subject")


def perturb_head(model, scale=0.05, seed=0):
    """Give the zero-initialised output layer non-trivial weights."""
    gen = torch.Generator().manual_seed(seed)
    last = model.decoder[-1]
    with torch.no_grad():
        last.weight.copy_(torch.randn(last.weight.shape, generator=gen) * scale)
        last.bias.fill_(0.01)
    return model
