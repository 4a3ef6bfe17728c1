import numpy as np
import pytest

from moenas.genome import Genome

# Reference architectures with known sizes, used as regression anchors.
KNOWN_2D = Genome(n_blocks=7, base_filters=16, k1=1, k2=3, k3=7,
                  activation="relu", merge="concat", dropout=0.15, lr=4e-4)
KNOWN_3D = Genome(n_blocks=5, base_filters=32, k1=3, k2=1, k3=5,
                  activation="elu", merge="concat", dropout=0.0, lr=5e-5)
TINY_2D = Genome(n_blocks=3, base_filters=4, k1=1, k2=1, k3=1,
                 activation="relu", merge="sum", dropout=0.2, lr=1e-3)

KNOWN_2D_PARAMS = 1_641_730
KNOWN_3D_PARAMS = 3_993_410
TINY_2D_PARAMS = 530


@pytest.fixture
def rng():
    return np.random.default_rng(42)
