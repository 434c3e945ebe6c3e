"""
Shared test fixtures.
"""

import numpy as np
import pytest

from cavitylab.core.phantom import PhantomSpec, generate_phantom
from cavitylab.core.volume import BinaryMask, Volume


@pytest.fixture
def rng():
    """Seeded generator so every test is reproducible."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    """Smallest phantom the generator accepts."""
    return PhantomSpec(dims=(16, 16, 16), seed=3)


@pytest.fixture
def small_pair(small_spec):
    return generate_phantom(small_spec)


@pytest.fixture
def noiseless_spec():
    """Phantom without noise, streaks or bias: preop and postop differ only in the cavity."""
    return PhantomSpec(
        dims=(20, 20, 20), seed=5, noise_sigma=0.0, streak_count=0, bias_amplitude=0.0
    )


@pytest.fixture
def textured_pair(rng):
    """Two correlated, non-constant volumes in [0, 1]."""
    x = rng.uniform(0.1, 0.9, (16, 16, 16))
    y = np.clip(0.7 * x + 0.3 * rng.uniform(0.0, 1.0, x.shape), 0.0, 1.0)
    return Volume.from_array(x), Volume.from_array(y)


@pytest.fixture
def cube_mask():
    """3x3x3 cube centered in a 5x5x5 grid."""
    data = np.zeros((5, 5, 5), dtype=bool)
    data[1:4, 1:4, 1:4] = True
    return BinaryMask.from_array(data)

