"""The operator network: lift, spectral (Fourier-kernel) layers with optional
segmentation-conditioned modulation, and pointwise projection to the
2-channel complex-modulus field.

All pointwise maps use 1x1x1 convolutions and the spectral weights act only
on retained low Fourier modes, so one parameter set applies across grid
resolutions.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .fields import Grid3, RealVolume, SegmentationMask
from .preprocess import CurlInput

CKPT_MAGIC = b"ONLICKPT"
INSTANCE_NORM_EPS = 1e-5


class CapacityError(ValueError):
    """Grid too small for the configured number of Fourier modes."""


class ConfigurationError(ValueError):
    """Inconsistent model inputs (e.g. conditioning enabled without a mask)."""


@dataclass
class ModelConfig:
    """Hyperparameters of the operator network."""

    layers: int = 5
    modes: int = 20
    width: int = 23
    in_channels: int = 7
    out_channels: int = 2
    spade: bool = False
    spade_hidden: int = 32
    spade_classes: int = 6
    activation: str = "gelu"

    def __post_init__(self):
        if self.layers < 1 or self.modes < 1 or self.width < 1:
            raise ValueError("layers, modes, and width must be positive")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unsupported activation {self.activation!r}")


def _activation(name):
    return F.gelu if name == "gelu" else F.relu


def check_capacity(config: ModelConfig, shape) -> None:
    """Raise CapacityError naming the first axis that cannot hold the modes."""
    nx, ny, nz = shape
    m = config.modes
    if nx < 2 * m:
        raise CapacityError(f"axis x: size {nx} < 2*modes = {2 * m}")
    if ny < 2 * m:
        raise CapacityError(f"axis y: size {ny} < 2*modes = {2 * m}")
    if nz // 2 + 1 < m:
        raise CapacityError(
            f"axis z: half-spectrum size {nz // 2 + 1} < modes = {m}")


class SpectralConv3d(nn.Module):
    """Channel-mixing multiplication on retained low Fourier modes.

    The real-to-complex transform runs along the last axis; the four corner
    blocks over the two full axes carry independent complex weights, stored
    as (re, im) pairs so the optimizer sees a flat real parameter vector.
    """

    def __init__(self, width, modes):
        super().__init__()
        self.width = width
        self.modes = modes
        # i.i.d. complex entries with total variance 1/(width * modes^3)
        std = (1.0 / (2.0 * width * modes**3)) ** 0.5
        self.weight = nn.Parameter(
            std * torch.randn(4, width, width, modes, modes, modes, 2))

    def forward(self, x):
        m = self.modes
        nx, ny, nz = x.shape[-3:]
        x_ft = torch.fft.rfftn(x, dim=(-3, -2, -1))
        out_ft = torch.zeros(
            x.shape[0], self.width, nx, ny, nz // 2 + 1,
            dtype=x_ft.dtype, device=x.device)
        w = torch.view_as_complex(self.weight)
        corners = ((slice(0, m), slice(0, m)),
                   (slice(-m, None), slice(0, m)),
                   (slice(0, m), slice(-m, None)),
                   (slice(-m, None), slice(-m, None)))
        for b, (sx, sy) in enumerate(corners):
            out_ft[:, :, sx, sy, :m] = torch.einsum(
                "bixyz,ioxyz->boxyz", x_ft[:, :, sx, sy, :m], w[b])
        # On the conjugate-symmetry z-planes the -m rows have no retained
        # mirror partner (+m); the inverse transform would symmetrize their
        # content onto +m and break exact band limitation, so drop them.
        sym_planes = [0]
        if nz % 2 == 0 and m > nz // 2:
            sym_planes.append(nz // 2)
        for zp in sym_planes:
            if nx > 2 * m:
                out_ft[:, :, nx - m, :, zp] = 0
            if ny > 2 * m:
                out_ft[:, :, :, ny - m, zp] = 0
        return torch.fft.irfftn(out_ft, s=(nx, ny, nz), dim=(-3, -2, -1))


def instance_norm(x, eps=INSTANCE_NORM_EPS):
    """Per-sample, per-channel standardization over all voxels."""
    mean = x.mean(dim=(2, 3, 4), keepdim=True)
    var = x.var(dim=(2, 3, 4), keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


class SpadeBlock(nn.Module):
    """Segmentation-conditioned scale/shift after instance normalization.

    All convolutions are 1x1x1 so the conditioning is independent of the
    spatial discretization.
    """

    def __init__(self, width, n_classes, hidden, activation="gelu"):
        super().__init__()
        self.conv1 = nn.Conv3d(n_classes, hidden, kernel_size=1)
        self.conv_gamma = nn.Conv3d(hidden, width, kernel_size=1)
        self.conv_beta = nn.Conv3d(hidden, width, kernel_size=1)
        self.act = _activation(activation)

    def forward(self, x, mask_onehot):
        if mask_onehot.shape[-3:] != x.shape[-3:]:
            raise ConfigurationError(
                f"mask grid {tuple(mask_onehot.shape[-3:])} != feature grid "
                f"{tuple(x.shape[-3:])}")
        h = self.act(self.conv1(mask_onehot))
        return self.conv_gamma(h) * instance_norm(x) + self.conv_beta(h)


class OperatorModel(nn.Module):
    """Lift -> T x (spectral + pointwise [+ conditioning]) -> project."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w = config.width
        self.lift = nn.Conv3d(config.in_channels, w, kernel_size=1)
        self.spectral = nn.ModuleList(
            SpectralConv3d(w, config.modes) for _ in range(config.layers))
        self.local = nn.ModuleList(
            nn.Conv3d(w, w, kernel_size=1) for _ in range(config.layers))
        if config.spade:
            self.spade = nn.ModuleList(
                SpadeBlock(w, config.spade_classes, config.spade_hidden,
                           config.activation)
                for _ in range(config.layers))
        self.proj1 = nn.Conv3d(w, w, kernel_size=1)
        self.proj2 = nn.Conv3d(w, config.out_channels, kernel_size=1)
        self.act = _activation(config.activation)

    def forward(self, x, mask_onehot=None):
        cfg = self.config
        if cfg.spade and mask_onehot is None:
            raise ConfigurationError("conditioning enabled but no mask given")
        check_capacity(cfg, x.shape[-3:])
        v = self.lift(x)
        for i in range(cfg.layers):
            y = self.spectral[i](v) + self.local[i](v)
            if cfg.spade:
                y = self.spade[i](y, mask_onehot)
            if i < cfg.layers - 1:
                y = self.act(y)
            v = y
        return self.proj2(self.act(self.proj1(v)))


def build_model(config: ModelConfig, seed: int = 0,
                dtype=torch.float32) -> OperatorModel:
    """Deterministically initialized model at the requested precision."""
    torch.manual_seed(seed)
    model = OperatorModel(config)
    return model.to(dtype)


def param_count(config: ModelConfig) -> int:
    """Scalar parameter count (complex spectral entries count as 2)."""
    w, m, t = config.width, config.modes, config.layers
    n = config.in_channels * w + w                     # lift
    per_layer = 4 * w * w * m**3 * 2 + (w * w + w)     # spectral + pointwise
    if config.spade:
        h, k = config.spade_hidden, config.spade_classes
        per_layer += (k * h + h) + 2 * (h * w + w)
    n += t * per_layer
    n += (w * w + w) + (w * config.out_channels + config.out_channels)  # proj
    return n


def flat_parameters(model: OperatorModel) -> torch.Tensor:
    """Stable flat view of all parameters (registration order)."""
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


def set_flat_parameters(model: OperatorModel, vec: torch.Tensor) -> None:
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            n = p.numel()
            p.copy_(vec[offset:offset + n].reshape(p.shape))
            offset += n
    if offset != vec.numel():
        raise ValueError(f"flat vector length {vec.numel()} != {offset}")


def resample_mask_nearest(mask: SegmentationMask, target: Grid3) -> SegmentationMask:
    """Nearest-neighbor label resampling onto the feature grid."""
    if mask.grid.shape == target.shape:
        return mask
    idx = []
    for nt, dt, ns, ds in zip(target.shape, target.spacing,
                              mask.grid.shape, mask.grid.spacing):
        src = np.rint((np.arange(nt) + 0.5) * dt / ds - 0.5).astype(int)
        idx.append(np.clip(src, 0, ns - 1))
    labels = mask.labels[np.ix_(idx[0], idx[1], idx[2])]
    return SegmentationMask(target, labels, mask.num_classes)


def model_forward(model: OperatorModel, x, mask: SegmentationMask = None) -> RealVolume:
    """Single-sample inference bridge from numpy volumes to the network.

    Accepts a CurlInput or a bare 7-channel RealVolume; the output is in
    whatever space the input lives in (normalize/denormalize is the caller's
    business). The mask, when given, is nearest-neighbor resampled to the
    input grid first.
    """
    vol = x.volume if isinstance(x, CurlInput) else x
    dtype = next(model.parameters()).dtype
    xt = torch.from_numpy(np.ascontiguousarray(vol.data)).to(dtype)[None]
    mt = None
    if mask is not None:
        mask = resample_mask_nearest(mask, vol.grid)
        mt = torch.from_numpy(mask.one_hot()).to(dtype)[None]
    with torch.no_grad():
        out = model(xt, mt)
    return RealVolume(vol.grid, out[0].cpu().numpy().astype(np.float64))


def _config_block(config: ModelConfig) -> bytes:
    lines = [f"{k} = {v}" for k, v in asdict(config).items()]
    return ("\n".join(lines) + "\n").encode()


def _parse_config_block(blob: bytes) -> ModelConfig:
    kwargs = {}
    casts = {f: t for f, t in (
        ("layers", int), ("modes", int), ("width", int),
        ("in_channels", int), ("out_channels", int),
        ("spade_hidden", int), ("spade_classes", int),
        ("activation", str))}
    for line in blob.decode().splitlines():
        if not line.strip():
            continue
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key == "spade":
            kwargs[key] = val == "True"
        else:
            kwargs[key] = casts[key](val)
    return ModelConfig(**kwargs)


def save_checkpoint(path, model: OperatorModel) -> None:
    """Write magic, config block, and the flat f32 vector with a CRC32."""
    vec = flat_parameters(model).to(torch.float32).cpu().numpy()
    payload = vec.astype("<f4").tobytes()
    block = _config_block(model.config)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(block)))
        fh.write(block)
        fh.write(struct.pack("<Q", vec.size))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path, dtype=torch.float32) -> OperatorModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (blen,) = struct.unpack_from("<I", raw, 8)
    config = _parse_config_block(raw[12:12 + blen])
    off = 12 + blen
    (n,) = struct.unpack_from("<Q", raw, off)
    off += 8
    payload = raw[off:off + 4 * n]
    (crc,) = struct.unpack_from("<I", raw, off + 4 * n)
    if zlib.crc32(payload) != crc:
        raise ValueError(f"{path}: parameter checksum mismatch")
    vec = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    model = OperatorModel(config).to(dtype)
    if vec.size != sum(p.numel() for p in model.parameters()):
        raise ValueError(f"{path}: parameter count mismatch")
    set_flat_parameters(model, torch.from_numpy(vec).to(dtype))
    return model
