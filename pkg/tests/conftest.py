import numpy as np
import pytest

# Published 3x3 design matrices (rows age-major, period-minor).
TABLE1 = np.array(
    [
        [1, 1, 0, 1, 0, 0, 0, 1, 0],
        [1, 1, 0, 0, 1, 0, 0, 0, 1],
        [1, 1, 0, -1, -1, -1, -1, -1, -1],
        [1, 0, 1, 1, 0, 0, 1, 0, 0],
        [1, 0, 1, 0, 1, 0, 0, 1, 0],
        [1, 0, 1, -1, -1, 0, 0, 0, 1],
        [1, -1, -1, 1, 0, 1, 0, 0, 0],
        [1, -1, -1, 0, 1, 0, 1, 0, 0],
        [1, -1, -1, -1, -1, 0, 0, 1, 0],
    ],
    dtype=float,
)

TABLE2 = np.array(
    [
        [1, 1, 0, 1, 0, 0, 0, 1, 0, 0],
        [1, 1, 0, 0, 1, 0, 0, 0, 1, 0],
        [1, 1, 0, -1, -1, 0, 0, 0, 0, 1],
        [1, 0, 1, 1, 0, 0, 1, 0, 0, 0],
        [1, 0, 1, 0, 1, 0, 0, 1, 0, 0],
        [1, 0, 1, -1, -1, 0, 0, 0, 1, 0],
        [1, -1, -1, 1, 0, 1, 0, 0, 0, 0],
        [1, -1, -1, 0, 1, 0, 1, 0, 0, 0],
        [1, -1, -1, -1, -1, 0, 0, 1, 0, 0],
    ],
    dtype=float,
)

TABLE3 = np.array(
    [
        [1, 1, 0, 1, 0, 0, 0, 0, 1, 0, 0],
        [1, 1, 0, 0, 1, 0, 0, 0, 0, 1, 0],
        [1, 1, 0, 0, 0, 1, 0, 0, 0, 0, 1],
        [1, 0, 1, 1, 0, 0, 0, 1, 0, 0, 0],
        [1, 0, 1, 0, 1, 0, 0, 0, 1, 0, 0],
        [1, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0],
        [1, -1, -1, 1, 0, 0, 1, 0, 0, 0, 0],
        [1, -1, -1, 0, 1, 0, 0, 1, 0, 0, 0],
        [1, -1, -1, 0, 0, 1, 0, 0, 1, 0, 0],
    ],
    dtype=float,
)


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)
