import numpy as np
import pytest
import torch

from onli.fields import ComplexVolume, Grid3, RealVolume


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_complex_volume(rng, shape=(2, 6, 6, 6), spacing=1e-3):
    grid = Grid3(*shape[1:], spacing, spacing, spacing)
    data = rng.normal(size=shape) + 1j * rng.normal(size=shape)
    return ComplexVolume(grid, data)


def random_real_volume(rng, shape=(2, 8, 8, 8), spacing=1e-3):
    grid = Grid3(*shape[1:], spacing, spacing, spacing)
    return RealVolume(grid, rng.normal(size=shape))


def band_limited_field(rng, grid, max_mode=4, channels=1):
    """Smooth periodic field with energy only below max_mode, unit-ish scale."""
    xs = [(np.arange(n) + 0.5) * d for n, d in zip(grid.shape, grid.spacing)]
    ext = grid.extent
    out = np.zeros((channels,) + grid.shape)
    x, y, z = np.meshgrid(*xs, indexing="ij")
    for c in range(channels):
        for _ in range(8):
            k = rng.integers(-max_mode, max_mode + 1, size=3)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.normal()
            out[c] += amp * np.cos(
                2 * np.pi * (k[0] * x / ext[0] + k[1] * y / ext[1]
                             + k[2] * z / ext[2]) + phase)
    return RealVolume(grid, out)
