import numpy as np
import pytest

from helpers import make_panel, two_level_tree


@pytest.fixture
def tree():
    return two_level_tree()


@pytest.fixture
def panel(tree):
    return make_panel(tree, rng=np.random.default_rng(11), n_steps=60, test_len=10)
