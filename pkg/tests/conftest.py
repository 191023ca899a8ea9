import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240711)


def quantized_image(rng, h, w, c=3):
    """Random image whose float values are exact 8-bit levels."""
    return rng.integers(0, 256, size=(h, w, c)).astype(np.float32) / np.float32(255.0)
