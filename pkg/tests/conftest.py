import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


# Reference example edge lists, 1-indexed (agent k is index k-1).
EXAMPLE_REVERSIBLE = [(1, 2), (1, 3), (2, 8), (2, 4), (3, 4), (3, 9), (8, 5), (4, 5), (4, 7), (9, 7),
                      (5, 6), (7, 6)]
EXAMPLE_SCRAMBLING = [(1, 2), (2, 1), (2, 3), (3, 1), (1, 3), (4, 3), (4, 5), (5, 1), (6, 1), (6, 3)]
EXAMPLE_HIERARCHICAL = [(9, 8), (9, 7), (8, 6), (7, 3), (7, 2), (6, 2), (5, 4), (4, 1), (3, 2), (2, 1)]
EXAMPLE_GENERAL = [(1, 2), (2, 3), (3, 4), (4, 1), (1, 3), (5, 3), (6, 3), (5, 6), (6, 5), (7, 4), (7, 1),
                   (8, 1), (9, 7), (9, 8)]


def edge_matrix(edges, n, symmetric=False):
    A = np.zeros((n, n))
    for i, j in edges:
        A[i - 1, j - 1] = 1.0
        if symmetric:
            A[j - 1, i - 1] = 1.0
    return A


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
