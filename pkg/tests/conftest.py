import numpy as np
import pytest

from spi_patterns.io import generate_phantoms


@pytest.fixture(scope="session")
def phantoms16():
    return generate_phantoms(24, (16, 16), seed=3)


def fd_grad(f, x, h=1e-6):
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g
