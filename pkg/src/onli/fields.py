"""Grid-aware 3D field containers, FFTs, resampling, and binary field files.

Volumes store their samples as ``(C, nx, ny, nz)`` arrays and are treated as
immutable after construction; all operations return new volumes.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

MAGIC = b"ONLIFLD1"

_KIND_REAL = 0
_KIND_COMPLEX = 1
_KIND_LABELS = 2

_DTYPE_F32 = 0
_DTYPE_F64 = 1
_DTYPE_U16 = 2

NAIVE_DFT_MAX_VOXELS = 4096


class SizingError(ValueError):
    """A volume or transform exceeds a hard size limit."""


class GeometryError(ValueError):
    """Grids that should describe the same physical domain do not."""


class FieldFormatError(ValueError):
    """Malformed field file; carries the byte offset of the defect."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Grid3:
    """Regular 3D voxel grid: counts per axis and spacing in meters."""

    nx: int
    ny: int
    nz: int
    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            if getattr(self, name) < 4:
                raise ValueError(f"{name} must be >= 4, got {getattr(self, name)}")
        for name in ("dx", "dy", "dz"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    @property
    def spacing(self):
        return (self.dx, self.dy, self.dz)

    @property
    def n_voxels(self):
        return self.nx * self.ny * self.nz

    @property
    def extent(self):
        """Physical size covered by the grid, per axis (meters)."""
        return (self.nx * self.dx, self.ny * self.dy, self.nz * self.dz)

    def same_extent(self, other, tol=1e-9):
        return all(
            abs(a - b) <= tol for a, b in zip(self.extent, other.extent)
        )


def _check_data(grid, data, channels):
    if data.shape != (channels,) + grid.shape:
        raise ValueError(
            f"data shape {data.shape} does not match (C={channels}, {grid.shape})"
        )
    if np.iscomplexobj(data):
        finite = np.isfinite(data.real) & np.isfinite(data.imag)
    else:
        finite = np.isfinite(data)
    if not finite.all():
        raise ValueError("volume contains non-finite samples")


@dataclass
class ComplexVolume:
    """Multi-channel complex field sampled on a Grid3, shape (C, nx, ny, nz)."""

    grid: Grid3
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if not np.iscomplexobj(self.data):
            self.data = self.data.astype(np.complex128)
        _check_data(self.grid, self.data, self.data.shape[0])

    @property
    def channels(self):
        return self.data.shape[0]


@dataclass
class RealVolume:
    """Multi-channel real field sampled on a Grid3, shape (C, nx, ny, nz)."""

    grid: Grid3
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if np.iscomplexobj(self.data):
            raise ValueError("RealVolume requires real-valued data")
        _check_data(self.grid, self.data, self.data.shape[0])

    @property
    def channels(self):
        return self.data.shape[0]


@dataclass
class SegmentationMask:
    """Integer class labels per voxel, values in {0..num_classes-1}."""

    grid: Grid3
    labels: np.ndarray
    num_classes: int = 6

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels)
        if self.labels.shape != self.grid.shape:
            raise ValueError(
                f"labels shape {self.labels.shape} != grid shape {self.grid.shape}"
            )
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range for num_classes")
        self.labels = self.labels.astype(np.uint16)

    def one_hot(self, dtype=np.float64):
        """Binary (K, nx, ny, nz) encoding of the labels."""
        out = np.zeros((self.num_classes,) + self.grid.shape, dtype=dtype)
        for k in range(self.num_classes):
            out[k] = self.labels == k
        return out


def fftn(v: ComplexVolume, inverse: bool = False) -> ComplexVolume:
    """Per-channel 3D DFT. Forward is unnormalized; inverse carries 1/N."""
    if v.grid.n_voxels > 2**31:
        raise SizingError("volume too large for FFT")
    fn = np.fft.ifftn if inverse else np.fft.fftn
    out = fn(v.data, axes=(1, 2, 3))
    return ComplexVolume(v.grid, out)


def naive_dftn(v: ComplexVolume, inverse: bool = False) -> ComplexVolume:
    """Direct triple-sum DFT, definitionally correct; the oracle for fftn.

    Guarded to small volumes: cost is O(N^2) in voxels.
    """
    if v.grid.n_voxels > NAIVE_DFT_MAX_VOXELS:
        raise SizingError(
            f"naive_dftn refuses volumes above {NAIVE_DFT_MAX_VOXELS} voxels"
        )
    sign = 1.0 if inverse else -1.0
    mats = []
    for n in v.grid.shape:
        j = np.arange(n)
        mats.append(np.exp(sign * 2j * np.pi * np.outer(j, j) / n))
    out = np.einsum("sxyz,xa,yb,zc->sabc", v.data, mats[0], mats[1], mats[2])
    if inverse:
        out = out / v.grid.n_voxels
    return ComplexVolume(v.grid, out)


def resample_trilinear(v, target: Grid3):
    """Resample onto a target grid covering the same physical extent.

    Samples live at voxel centers (i + 1/2) * d. Identity grids short-circuit
    to a bitwise copy.
    """
    if not v.grid.same_extent(target):
        raise GeometryError(
            f"source extent {v.grid.extent} != target extent {target.extent}"
        )
    if v.grid.shape == target.shape and v.grid.spacing == target.spacing:
        return type(v)(v.grid, v.data.copy())

    coords = np.meshgrid(
        *[
            (np.arange(nt) + 0.5) * dt / ds - 0.5
            for nt, dt, ds in zip(target.shape, target.spacing, v.grid.spacing)
        ],
        indexing="ij",
    )
    coords = np.stack(coords)

    def interp(a):
        return map_coordinates(a, coords, order=1, mode="nearest")

    if np.iscomplexobj(v.data):
        out = np.stack([interp(c.real) + 1j * interp(c.imag) for c in v.data])
        return ComplexVolume(target, out)
    out = np.stack([interp(c) for c in v.data])
    return RealVolume(target, out)


def _dtype_code(data):
    if data.dtype == np.float32 or data.dtype == np.complex64:
        return _DTYPE_F32
    return _DTYPE_F64


def write_field(path, v) -> None:
    """Serialize a volume or mask to the binary field format (little-endian)."""
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise FileNotFoundError(f"parent directory does not exist: {parent}")
    g = v.grid
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        if isinstance(v, SegmentationMask):
            fh.write(struct.pack("<BBIIII", _KIND_LABELS, _DTYPE_U16, 1,
                                 g.nx, g.ny, g.nz))
            fh.write(struct.pack("<ddd", g.dx, g.dy, g.dz))
            fh.write(v.labels.astype("<u2").tobytes())
            fh.write(struct.pack("<I", v.num_classes))
            return
        if isinstance(v, ComplexVolume):
            kind = _KIND_COMPLEX
            dt = _dtype_code(v.data)
            base = "<f4" if dt == _DTYPE_F32 else "<f8"
            payload = np.empty(v.data.shape + (2,), dtype=base)
            payload[..., 0] = v.data.real
            payload[..., 1] = v.data.imag
        elif isinstance(v, RealVolume):
            kind = _KIND_REAL
            dt = _dtype_code(v.data)
            base = "<f4" if dt == _DTYPE_F32 else "<f8"
            payload = v.data.astype(base)
        else:
            raise TypeError(f"unsupported field type {type(v).__name__}")
        fh.write(struct.pack("<BBIIII", kind, dt, v.channels, g.nx, g.ny, g.nz))
        fh.write(struct.pack("<ddd", g.dx, g.dy, g.dz))
        fh.write(payload.tobytes())


def read_field(path):
    """Read a field file back into the matching container, bit-exactly."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:8] != MAGIC:
        raise FieldFormatError("bad magic bytes", 0)
    if len(raw) < 50:
        raise FieldFormatError("truncated header", len(raw))
    kind, dt, channels, nx, ny, nz = struct.unpack_from("<BBIIII", raw, 8)
    dx, dy, dz = struct.unpack_from("<ddd", raw, 26)
    off = 50
    try:
        grid = Grid3(nx, ny, nz, dx, dy, dz)
    except ValueError as exc:
        raise FieldFormatError(f"invalid grid: {exc}", 10) from exc
    nvox = grid.n_voxels

    if kind == _KIND_LABELS:
        if dt != _DTYPE_U16:
            raise FieldFormatError(f"label files require u16 dtype, got {dt}", 9)
        need = nvox * 2
        if len(raw) < off + need + 4:
            raise FieldFormatError("truncated label payload", len(raw))
        labels = np.frombuffer(raw, dtype="<u2", count=nvox, offset=off)
        (k,) = struct.unpack_from("<I", raw, off + need)
        return SegmentationMask(grid, labels.reshape(grid.shape).copy(), k)

    if dt == _DTYPE_F32:
        base, width = "<f4", 4
    elif dt == _DTYPE_F64:
        base, width = "<f8", 8
    else:
        raise FieldFormatError(f"unknown dtype code {dt}", 9)

    per = 2 if kind == _KIND_COMPLEX else 1
    count = channels * nvox * per
    if len(raw) < off + count * width:
        raise FieldFormatError("truncated payload", len(raw))
    flat = np.frombuffer(raw, dtype=base, count=count, offset=off)
    if kind == _KIND_COMPLEX:
        pairs = flat.reshape((channels,) + grid.shape + (2,))
        data = (pairs[..., 0] + 1j * pairs[..., 1]).astype(
            np.complex64 if dt == _DTYPE_F32 else np.complex128
        )
        return ComplexVolume(grid, data)
    if kind == _KIND_REAL:
        return RealVolume(grid, flat.reshape((channels,) + grid.shape).copy())
    raise FieldFormatError(f"unknown kind code {kind}", 8)
