import numpy as np
import pytest

from qdnet import qmath, states


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_hermitian(rng, dim):
    m = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    return qmath.hermitize(m)


def bell_phi_plus():
    v = np.array([1, 0, 0, 1], dtype=complex) / np.sqrt(2)
    return np.outer(v, v.conj())


def random_product_state(rng):
    return qmath.tensor(states._ginibre(rng, 2), states._ginibre(rng, 2))
