import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def away_from_zero(rng, shape, margin=0.05):
    """Gaussian draws pushed at least ``margin`` away from 0 (keeps relu kinks out of difference stencils)."""
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin, x)
