import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(f, x, h=1e-5):
    """Elementwise central finite-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        g.ravel()[i] = (f((flat + bump).reshape(x.shape))
                        - f((flat - bump).reshape(x.shape))) / (2 * h)
    return g
