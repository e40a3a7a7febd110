import numpy as np
import pytest
import torch

from helpers import make_records

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def records():
    return make_records()
