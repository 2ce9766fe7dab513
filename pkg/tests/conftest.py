import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    # keeps float reductions order-stable across runs on the same machine
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)
