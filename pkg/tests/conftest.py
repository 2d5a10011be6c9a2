import numpy as np
import pytest

from lowbit.tensor import Rng


def naive_matmul_f32(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop float32 reference: products and partial sums each rounded
    to float32, accumulated left to right over the inner dimension."""
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for p in range(k):
                acc = np.float32(acc + np.float32(a[i, p] * b[p, j]))
            out[i, j] = acc
    return out


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)
