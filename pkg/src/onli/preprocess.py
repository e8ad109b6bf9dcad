"""From raw time-series displacements to the 7-channel network input.

Pipeline: temporal harmonic extraction at the actuation frequency, curl of
the complex displacement field, packing into a 7-channel real volume
(re/im curl + frequency/100), and per-channel unit-Gaussian normalization.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .fields import ComplexVolume, Grid3, RealVolume

STD_FLOOR = 1e-8

N_INPUT_CHANNELS = 7
N_TARGET_CHANNELS = 2


class SamplingError(ValueError):
    """Time series is too short or not uniformly sampled over one period."""


class StencilError(ValueError):
    """Grid too small for the finite-difference stencil."""


@dataclass
class TimeSeriesField:
    """Real displacement samples (3, Nt, nx, ny, nz) over one actuation period."""

    grid: Grid3
    data: np.ndarray
    omega: float

    def __post_init__(self):
        if self.data.ndim != 5 or self.data.shape[0] != 3:
            raise ValueError(f"expected (3, Nt, nx, ny, nz), got {self.data.shape}")
        if self.data.shape[2:] != self.grid.shape:
            raise ValueError("spatial dims do not match grid")
        if self.omega <= 0:
            raise ValueError("omega must be positive")

    @property
    def n_frames(self):
        return self.data.shape[1]

    @property
    def period(self):
        return 2.0 * np.pi / self.omega


@dataclass
class CurlInput:
    """7-channel real input: re(curl) x/y/z, im(curl) x/y/z, f_Hz/100."""

    volume: RealVolume
    frequency_hz: float

    def __post_init__(self):
        if self.volume.channels != N_INPUT_CHANNELS:
            raise ValueError(f"CurlInput needs {N_INPUT_CHANNELS} channels")

    def split(self) -> ComplexVolume:
        """Recover the complex curl field from channels 0-5."""
        d = self.volume.data
        return ComplexVolume(self.volume.grid, d[0:3] + 1j * d[3:6])


@dataclass
class NormalizerStats:
    """Per-channel mean/std for inputs (7ch) and targets (2ch)."""

    input_mean: np.ndarray
    input_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray

    def __post_init__(self):
        for arr, n in ((self.input_mean, 7), (self.input_std, 7),
                       (self.target_mean, 2), (self.target_std, 2)):
            if np.asarray(arr).shape != (n,):
                raise ValueError("stats have wrong channel counts")
        if np.any(self.input_std <= 0) or np.any(self.target_std <= 0):
            raise ValueError("standard deviations must be positive")


def extract_harmonic(ts: TimeSeriesField) -> ComplexVolume:
    """Complex amplitude at the actuation frequency from one sampled period.

    Computes (1/Nt) * sum_k r_k exp(-2*pi*i*k/Nt), the discrete analogue of
    the period-average Fourier coefficient with the exp(-i*omega*t) kernel.
    """
    nt = ts.n_frames
    if nt < 4:
        raise SamplingError(f"need at least 4 frames, got {nt}")
    phases = np.exp(-2j * np.pi * np.arange(nt) / nt)
    out = np.tensordot(phases, ts.data.astype(np.float64), axes=([0], [1])) / nt
    return ComplexVolume(ts.grid, out)


def _axis_derivative(data, axis, h):
    """Second-order derivative: central interior, one-sided at the edges."""
    return np.gradient(data, h, axis=axis, edge_order=2)


def curl(u: ComplexVolume) -> ComplexVolume:
    """Curl of a 3-channel field via second-order finite differences."""
    if u.channels != 3:
        raise ValueError(f"curl needs 3 channels, got {u.channels}")
    if min(u.grid.shape) < 4:
        raise StencilError("every grid dimension must be >= 4 for the stencil")
    dx, dy, dz = u.grid.spacing
    ux, uy, uz = u.data
    cx = _axis_derivative(uz, 1, dy) - _axis_derivative(uy, 2, dz)
    cy = _axis_derivative(ux, 2, dz) - _axis_derivative(uz, 0, dx)
    cz = _axis_derivative(uy, 0, dx) - _axis_derivative(ux, 1, dy)
    return ComplexVolume(u.grid, np.stack([cx, cy, cz]))


def assemble_input(cu: ComplexVolume, f_hz: float) -> CurlInput:
    """Pack a complex curl field and the frequency channel into a CurlInput."""
    if f_hz <= 0:
        raise ValueError("frequency must be positive")
    if cu.channels != 3:
        raise ValueError("expected a 3-channel curl field")
    data = np.empty((N_INPUT_CHANNELS,) + cu.grid.shape, dtype=np.float64)
    data[0:3] = cu.data.real
    data[3:6] = cu.data.imag
    data[6] = f_hz / 100.0
    return CurlInput(RealVolume(cu.grid, data), f_hz)


def _pooled_stats(arrays):
    """Per-channel mean/std pooled over all voxels of all arrays."""
    flat = np.concatenate([a.reshape(a.shape[0], -1) for a in arrays], axis=1)
    mean = flat.mean(axis=1)
    std = flat.std(axis=1)
    return mean, std


def fit_normalizer(inputs, targets) -> NormalizerStats:
    """Estimate per-channel standardization stats from a training set."""
    if len(inputs) < 2 or len(targets) < 2:
        raise ValueError("need at least 2 samples to fit a normalizer")
    in_mean, in_std = _pooled_stats([ci.volume.data for ci in inputs])
    tg_mean, tg_std = _pooled_stats([t.data for t in targets])
    for name, std in (("input", in_std), ("target", tg_std)):
        low = std < STD_FLOOR
        if low.any():
            warnings.warn(
                f"constant {name} channel(s) {np.where(low)[0].tolist()}; "
                f"flooring std at {STD_FLOOR}"
            )
            std[low] = STD_FLOOR
    return NormalizerStats(in_mean, in_std, tg_mean, tg_std)


def _stats_for(stats: NormalizerStats, role: str):
    if role == "input":
        return stats.input_mean, stats.input_std
    if role == "target":
        return stats.target_mean, stats.target_std
    raise ValueError(f"role must be 'input' or 'target', got {role!r}")


def normalize(v: RealVolume, stats: NormalizerStats, role: str) -> RealVolume:
    mean, std = _stats_for(stats, role)
    data = (v.data - mean[:, None, None, None]) / std[:, None, None, None]
    return RealVolume(v.grid, data)


def denormalize(v: RealVolume, stats: NormalizerStats, role: str) -> RealVolume:
    mean, std = _stats_for(stats, role)
    data = v.data * std[:, None, None, None] + mean[:, None, None, None]
    return RealVolume(v.grid, data)


def save_normalizer(path, stats: NormalizerStats) -> None:
    """Key-value text serialization with 17 significant digits."""
    with open(path, "w") as fh:
        for role, mean, std in (("input", stats.input_mean, stats.input_std),
                                ("target", stats.target_mean, stats.target_std)):
            for c in range(len(mean)):
                fh.write(f"{role}.{c}.mean = {mean[c]:.17g}\n")
                fh.write(f"{role}.{c}.std = {std[c]:.17g}\n")


def load_normalizer(path) -> NormalizerStats:
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = float(val)
    def gather(role, stat, n):
        return np.array([values[f"{role}.{c}.{stat}"] for c in range(n)])
    return NormalizerStats(
        gather("input", "mean", 7), gather("input", "std", 7),
        gather("target", "mean", 2), gather("target", "std", 2),
    )
