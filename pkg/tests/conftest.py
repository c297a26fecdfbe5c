import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_images():
    """Small deterministic image batch shared by cheap tests."""
    from purikit.data import make_toy_dataset
    from purikit.rng import RngState

    return make_toy_dataset(32, RngState(7), size=16).images
