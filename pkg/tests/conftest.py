import numpy as np
import pytest

from corrseg.unet3d import NetworkConfig
from corrseg.volume_io import Volume


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_config():
    """Smallest valid network; keeps unit tests fast."""
    return NetworkConfig(
        base_features=4,
        levels=2,
        downsample=((2, 2, 2),),
        groupnorm_groups=2,
        patch_dims=(16, 16, 8),
        batch_size=2,
    )


@pytest.fixture
def small_volume(rng):
    grid = rng.normal(0.0, 50.0, size=(24, 24, 16)).astype(np.float32)
    return Volume(id="vol_a", grid=grid, spacing=(1.0, 1.0, 2.0))
