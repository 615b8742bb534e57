import os
import sys

import numpy as np
import pytest

# Source modules import each other as top-level packages (config, utils.*)
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src"))

from utils.fourier import MaskSpec, make_mask  # noqa: E402
from utils.spirit import SpiritImageWeights  # noqa: E402


def crandn(rng, *shape):
    """Complex Gaussian array with unit-variance real and imaginary parts"""
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def rel_dot_error(lhs: complex, rhs: complex, x, y) -> float:
    return abs(lhs - rhs) / (np.linalg.norm(x) * np.linalg.norm(y))


def random_weights(rng, coils: int, rows: int, cols: int, scale: float = 0.5) -> SpiritImageWeights:
    return SpiritImageWeights(scale * crandn(rng, coils, coils, rows, cols))


def random_mask(rows: int, cols: int, rate: float = 0.5, acs_lines: int = 2, seed: int = 0):
    return make_mask(MaskSpec(rate=rate, acs_lines=acs_lines, seed=seed), rows, cols)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
