"""Synthetic ground truth: phantoms, a time-harmonic forward solver, and
classical direct inversion.

The forward model solves, per displacement component, the heterogeneous
scalar shear-wave equation  div(mu grad u) + rho*omega^2*u = 0  with a
prescribed harmonic drive on the x=0 face, an absorbing sponge in front of
the outflow face, and symmetry (zero-flux) lateral walls. The full vector Navier system with the second Lame term is
deliberately not solved: the learning task consumes curl (shear-only) data,
and the near-incompressible pressure term only stiffens the linear system.
"""
from __future__ import annotations

import hashlib
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.ndimage import gaussian_filter

from . import preprocess
from .fields import ComplexVolume, Grid3, RealVolume, SegmentationMask, write_field

DEFAULT_DENSITY = 1000.0  # kg/m^3
DIRECT_SOLVE_MAX_VOXELS = 48**3


class SolverError(RuntimeError):
    """Linear solve failed to reach the requested residual."""

    def __init__(self, message, residual_history=None):
        super().__init__(message)
        self.residual_history = residual_history or []


@dataclass
class Inclusion:
    """One geometric inclusion: center/size in meters, its own modulus."""

    shape: str  # sphere | box | ellipsoid
    center: tuple
    size: tuple  # sphere: (radius,)*3; box/ellipsoid: half-extents per axis
    mu_storage: float
    mu_loss: float
    label: int = 1

    def membership(self, x, y, z):
        cx, cy, cz = self.center
        sx, sy, sz = self.size
        if self.shape == "sphere":
            return (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= sx**2
        if self.shape == "ellipsoid":
            return ((x - cx) / sx) ** 2 + ((y - cy) / sy) ** 2 + ((z - cz) / sz) ** 2 <= 1.0
        if self.shape == "box":
            return (np.abs(x - cx) <= sx) & (np.abs(y - cy) <= sy) & (np.abs(z - cz) <= sz)
        raise ValueError(f"unknown inclusion shape {self.shape!r}")


@dataclass
class PhantomSpec:
    """Heterogeneous complex shear-modulus map description."""

    grid: Grid3
    background_storage: float
    background_loss: float
    inclusions: list = field(default_factory=list)
    density: float = DEFAULT_DENSITY
    blur_sigma: float = 1.0  # voxels; smooths modulus discontinuities
    num_classes: int = 6
    background_label: int = 0

    def __post_init__(self):
        if self.background_storage <= 0:
            raise ValueError("background storage modulus must be > 0")
        if self.background_loss < 0:
            raise ValueError("background loss modulus must be >= 0")
        if not (0 <= self.background_label < self.num_classes):
            raise ValueError("background label out of range")
        for inc in self.inclusions:
            if inc.mu_storage <= 0:
                raise ValueError("inclusion storage modulus must be > 0")
            if not (0 < inc.label < self.num_classes):
                raise ValueError("inclusion label out of range")


@dataclass
class SolverConfig:
    """Drive/absorption and linear-solver settings for solve_forward."""

    omega: float
    tolerance: float = 1e-8
    max_iterations: int = 2000
    sponge_voxels: int = 6
    sponge_strength: float = 3.0

    def __post_init__(self):
        if not (0 < self.tolerance <= 1e-3):
            raise ValueError("tolerance must lie in (0, 1e-3]")
        if self.omega <= 0:
            raise ValueError("omega must be positive")


def _voxel_centers(grid):
    xs = (np.arange(grid.nx) + 0.5) * grid.dx
    ys = (np.arange(grid.ny) + 0.5) * grid.dy
    zs = (np.arange(grid.nz) + 0.5) * grid.dz
    return np.meshgrid(xs, ys, zs, indexing="ij")


def generate_phantom(spec: PhantomSpec, seed: int = 0):
    """Voxelize a phantom: smoothed complex modulus plus a label mask.

    The mask records pre-blur membership; overlapping inclusions are resolved
    in list order (later wins) with a warning.
    """
    x, y, z = _voxel_centers(spec.grid)
    mu = np.full(spec.grid.shape, spec.background_storage + 1j * spec.background_loss,
                 dtype=np.complex128)
    labels = np.full(spec.grid.shape, spec.background_label, dtype=np.uint16)
    claimed = np.zeros(spec.grid.shape, dtype=bool)
    for inc in spec.inclusions:
        inside = inc.membership(x, y, z)
        if (inside & claimed).any():
            warnings.warn("overlapping inclusions; later inclusion wins")
        mu[inside] = inc.mu_storage + 1j * inc.mu_loss
        labels[inside] = inc.label
        claimed |= inside
    if spec.blur_sigma > 0:
        mu = (gaussian_filter(mu.real, spec.blur_sigma, mode="nearest")
              + 1j * gaussian_filter(mu.imag, spec.blur_sigma, mode="nearest"))
    return (ComplexVolume(spec.grid, mu[None]),
            SegmentationMask(spec.grid, labels, spec.num_classes))


def _sponge_profile(grid, n_sponge, strength):
    """Quadratically graded damping near the outflow (far x) face.

    Lateral walls are symmetry (Neumann) planes, so only the face opposite
    the drive needs absorption; this keeps a uniform drive an exact plane
    wave in the homogeneous case.
    """
    alpha = np.zeros(grid.shape)
    if n_sponge <= 0:
        return alpha
    dist = (grid.nx - 1 - np.arange(grid.nx)).astype(float)
    ramp = np.clip((n_sponge - dist) / n_sponge, 0.0, 1.0) ** 2
    alpha += (strength * ramp)[:, None, None]
    return alpha


def _assemble(mu, grid, rho, cfg):
    """Flux-form 7-point operator with face-averaged modulus.

    Boundary voxels carry identity (Dirichlet) rows. Returns (A, dirichlet
    boolean field); right-hand sides are built per component.
    """
    nx, ny, nz = grid.shape
    n = grid.n_voxels
    idx = np.arange(n).reshape(grid.shape)

    # Dirichlet on the drive face (x=0) and behind the sponge (x=nx-1);
    # lateral faces are natural (zero-flux) symmetry walls.
    boundary = np.zeros(grid.shape, dtype=bool)
    boundary[0, :, :] = boundary[-1, :, :] = True
    interior = ~boundary

    alpha = _sponge_profile(grid, cfg.sponge_voxels, cfg.sponge_strength)
    # e^{+i omega t} convention: damping enters as rho*omega^2*(1 - i*alpha)
    mass = rho * cfg.omega**2 * (1.0 - 1j * alpha)

    rows, cols, vals = [], [], []
    diag = np.zeros(grid.shape, dtype=np.complex128)
    diag[interior] += mass[interior]

    spacings = grid.spacing
    for axis in range(3):
        h2 = spacings[axis] ** 2
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        mu_face = 0.5 * (mu[tuple(lo)] + mu[tuple(hi)]) / h2
        # face couples cell p (low side) and q (high side)
        p_int = interior[tuple(lo)]
        q_int = interior[tuple(hi)]
        p_idx = idx[tuple(lo)]
        q_idx = idx[tuple(hi)]
        # contribution to row p: +mu_face*(u_q - u_p)
        m = p_int
        rows.append(p_idx[m]); cols.append(q_idx[m]); vals.append(mu_face[m])
        # contribution to row q: +mu_face*(u_p - u_q)
        m2 = q_int
        rows.append(q_idx[m2]); cols.append(p_idx[m2]); vals.append(mu_face[m2])
        # diagonal decrements on both sides of the face
        pad_lo = np.zeros(grid.shape, dtype=np.complex128)
        pad_lo[tuple(lo)] = mu_face
        pad_hi = np.zeros(grid.shape, dtype=np.complex128)
        pad_hi[tuple(hi)] = mu_face
        diag[interior] -= (pad_lo + pad_hi)[interior]

    # interior diagonal + Dirichlet rows, scaled to the interior magnitude
    # so the factorization stays well conditioned
    flat = idx.ravel()
    rows.append(flat); cols.append(flat)
    dvals = diag.ravel().copy()
    dirichlet_scale = np.abs(diag[interior]).mean()
    dvals[boundary.ravel()] = dirichlet_scale
    vals.append(dvals)

    rows = np.concatenate([np.asarray(r).ravel() for r in rows])
    cols = np.concatenate([np.asarray(c).ravel() for c in cols])
    vals = np.concatenate([np.asarray(v).ravel() for v in vals])
    a = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return a, boundary, dirichlet_scale


def random_drive(grid: Grid3, rng, max_mode: int = 2,
                 amplitude: float = 1.0) -> np.ndarray:
    """Smooth random complex face profile for all three components.

    Returns a (3, ny, nz) array: per component a low-order random Fourier
    sum over the face, normalized to the requested RMS amplitude. Used to
    excite spatially rich, multi-component wave fields.
    """
    ys = (np.arange(grid.ny) + 0.5) / grid.ny
    zs = (np.arange(grid.nz) + 0.5) / grid.nz
    y, z = np.meshgrid(ys, zs, indexing="ij")
    out = np.zeros((3, grid.ny, grid.nz), dtype=np.complex128)
    for c in range(3):
        prof = np.zeros((grid.ny, grid.nz), dtype=np.complex128)
        for ky in range(0, max_mode + 1):
            for kz in range(-max_mode, max_mode + 1):
                coef = rng.normal() + 1j * rng.normal()
                prof += coef * np.exp(2j * np.pi * (ky * y + kz * z))
        rms = np.sqrt(np.mean(np.abs(prof) ** 2))
        out[c] = amplitude * prof / rms
    return out


def _drive_rhs(grid, boundary, scale, drive_lo, drive_hi):
    """Right-hand sides for prescribed face displacements.

    ``drive_lo``/``drive_hi`` are (3, ny, nz) complex profiles on the x=0
    and x=nx-1 faces. None defaults to the uniform unit y drive on x=0 and
    a homogeneous far face.
    """
    n = grid.n_voxels
    rhs = np.zeros((3, n), dtype=np.complex128)
    for c in range(3):
        face = np.zeros(grid.shape, dtype=np.complex128)
        if drive_lo is None:
            if c == 1:
                face[0, :, :] = 1.0
        else:
            face[0, :, :] = drive_lo[c]
        if drive_hi is not None:
            face[-1, :, :] = drive_hi[c]
        if face.any():
            rhs[c] = scale * np.where(boundary, face, 0).ravel()
    return rhs


def solve_forward(mu: ComplexVolume, cfg: SolverConfig,
                  density: float = DEFAULT_DENSITY,
                  drive_lo: np.ndarray = None,
                  drive_hi: np.ndarray = None) -> ComplexVolume:
    """Displacement field for the phantom under harmonic face drives.

    By default the drive prescribes unit displacement along y on the x=0
    face and the far x face is homogeneous Dirichlet behind the sponge;
    explicit (3, ny, nz) profiles may be prescribed on either x face.
    Lateral walls are symmetry planes.
    """
    grid = mu.grid
    if min(grid.shape) < 16:
        raise ValueError("solve_forward needs at least 16 voxels per axis")
    if np.any(mu.data.real <= 0):
        raise ValueError("storage modulus must be positive everywhere")
    a, boundary, scale = _assemble(mu.data[0], grid, density, cfg)

    n = grid.n_voxels
    rhs = _drive_rhs(grid, boundary, scale, drive_lo, drive_hi)

    sols = np.zeros_like(rhs)
    lu = None
    for c in range(3):
        if not rhs[c].any():
            continue
        if n <= DIRECT_SOLVE_MAX_VOXELS:
            if lu is None:
                lu = spla.splu(a.tocsc())
            sols[c] = lu.solve(rhs[c])
        else:
            ilu = spla.spilu(a.tocsc(), drop_tol=1e-5, fill_factor=20)
            prec = spla.LinearOperator((n, n), ilu.solve)
            history = []
            x0, info = spla.gmres(a, rhs[c], rtol=cfg.tolerance, restart=50,
                                  maxiter=cfg.max_iterations, M=prec,
                                  callback=lambda r: history.append(float(r)),
                                  callback_type="pr_norm")
            if info != 0:
                raise SolverError(
                    f"iterative solve did not converge (info={info})", history)
            sols[c] = x0

    b_norm = np.linalg.norm(rhs, axis=1)
    for c in range(3):
        if b_norm[c] == 0:
            continue
        res = np.linalg.norm(a @ sols[c] - rhs[c]) / b_norm[c]
        if res > cfg.tolerance:
            raise SolverError(
                f"component {c}: residual {res:.3e} above tolerance", [res])
    return ComplexVolume(grid, sols.reshape((3,) + grid.shape))


def residual_norm(mu: ComplexVolume, u: ComplexVolume, cfg: SolverConfig,
                  density: float = DEFAULT_DENSITY,
                  drive_lo: np.ndarray = None,
                  drive_hi: np.ndarray = None) -> float:
    """Re-check a returned displacement field against the discrete operator."""
    a, boundary, scale = _assemble(mu.data[0], mu.grid, density, cfg)
    rhs = _drive_rhs(mu.grid, boundary, scale, drive_lo, drive_hi)
    num = 0.0
    den = 0.0
    for c in range(3):
        num += np.linalg.norm(a @ u.data[c].ravel() - rhs[c]) ** 2
        den += np.linalg.norm(rhs[c]) ** 2
    return float(np.sqrt(num / den))


def _laplacian(f, spacing):
    """Second-order Laplacian: central interior, one-sided at the edges."""
    out = np.zeros_like(f)
    for axis, h in enumerate(spacing):
        d2 = np.empty_like(f)
        sl = [slice(None)] * 3

        def take(s):
            sl2 = list(sl)
            sl2[axis] = s
            return f[tuple(sl2)]

        core = (np.roll(f, -1, axis) - 2 * f + np.roll(f, 1, axis)) / h**2
        d2[:] = core
        # one-sided second-order second derivative at the two faces
        first = (2 * take(0) - 5 * take(1) + 4 * take(2) - take(3)) / h**2
        last = (2 * take(-1) - 5 * take(-2) + 4 * take(-3) - take(-4)) / h**2
        sl_first = [slice(None)] * 3
        sl_first[axis] = 0
        sl_last = [slice(None)] * 3
        sl_last[axis] = -1
        d2[tuple(sl_first)] = first
        d2[tuple(sl_last)] = last
        out += d2
    return out


def direct_inversion(u: ComplexVolume, density: float, omega: float,
                     eps_rel: float = 1e-8):
    """Algebraic modulus estimate mu = -rho*omega^2*u / lap(u).

    Component estimates are combined by a |lap|-magnitude-weighted average;
    voxels where every component's Laplacian sits below the floor are flagged
    invalid rather than raising. Returns (mu_estimate C=1, valid mask array).
    """
    laps = np.stack([_laplacian(c, u.grid.spacing) for c in u.data])
    mags = np.abs(laps)
    floor = eps_rel * np.median(mags[mags > 0]) if (mags > 0).any() else np.inf
    usable = mags >= floor
    weights = np.where(usable, mags, 0.0)
    est = np.zeros(u.grid.shape, dtype=np.complex128)
    wsum = weights.sum(axis=0)
    valid = wsum > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        per = np.where(usable, -density * omega**2 * u.data / np.where(usable, laps, 1.0), 0.0)
    est[valid] = (weights * per).sum(axis=0)[valid] / wsum[valid]
    return ComplexVolume(u.grid, np.where(valid, est, 0.0)[None]), valid


def sample_phantom_spec(grid: Grid3, rng: np.random.Generator,
                        n_inclusions_range=(2, 4),
                        storage_range=(1500.0, 3500.0),
                        loss_fraction_range=(0.10, 0.35),
                        num_classes: int = 6) -> PhantomSpec:
    """Draw a random phantom: background plus sphere/box/ellipsoid inclusions.

    Labels behave like tissue classes with characteristic mechanics, as
    anatomical classes do: the background is one of four classes banded
    over [1800, 2600] Pa, inclusions draw one of two classes with storage
    bands inside ``storage_range``, and each class also has its own
    loss-fraction sub-band of ``loss_fraction_range``. A segmentation mask
    is therefore an informative cross-subject prior on the complex modulus
    while the exact values still vary per subject.
    """
    ext = grid.extent
    xi_lo, xi_hi = loss_fraction_range

    def class_loss_fraction(idx, n_bands):
        edges = np.linspace(xi_lo, xi_hi, n_bands + 1)
        return rng.uniform(edges[idx], edges[idx + 1])

    bg_label = int(rng.integers(0, 4))
    bg_edges = np.linspace(1800.0, 2600.0, 5)
    background = rng.uniform(bg_edges[bg_label], bg_edges[bg_label + 1])
    bg_xi = class_loss_fraction(bg_label, 4)
    n_inc = int(rng.integers(n_inclusions_range[0], n_inclusions_range[1] + 1))
    lo, hi = storage_range
    span = hi - lo
    centers = (lo + 0.1875 * span, hi - 0.1875 * span)
    half_band = 0.1875 * span
    inclusions = []
    for i in range(n_inc):
        shape = rng.choice(["sphere", "box", "ellipsoid"])
        center = tuple(rng.uniform(0.25 * e, 0.75 * e) for e in ext)
        size = tuple(rng.uniform(0.10 * e, 0.18 * e) for e in ext)
        if shape == "sphere":
            size = (min(size),) * 3
        label = int(rng.integers(4, num_classes))
        c = centers[label - 4]
        mu_s = float(np.clip(rng.uniform(c - half_band, c + half_band),
                             lo, hi))
        inclusions.append(Inclusion(
            shape=str(shape), center=center, size=size,
            mu_storage=mu_s,
            mu_loss=mu_s * class_loss_fraction(label - 4, 2),
            label=label))
    return PhantomSpec(
        grid=grid, background_storage=background,
        background_loss=background * bg_xi,
        inclusions=inclusions, num_classes=num_classes,
        background_label=bg_label)


def make_dataset(n_subjects: int, out_dir: str, grid: Grid3,
                 frequencies=(30.0, 50.0, 70.0), seed: int = 0,
                 missing=None, noise_std: float = 0.0,
                 sponge_strength: float = 3.0, tolerance: float = 1e-8,
                 drive_mix: float = 0.3) -> str:
    """Manufacture a per-subject dataset of solved wave fields on disk.

    Every subject is excited on the x=0 face with a uniform transverse
    (y-polarized) drive plus a ``drive_mix``-scaled smooth random
    multi-component profile that is fixed per frequency — one "actuator
    setup" per frequency, as in a real acquisition. The perturbation
    populates all six curl channels while the dominant traveling wave
    keeps the inverse problem well conditioned; the far-face sponge
    absorbs the outgoing energy. Writes, per subject: target
    modulus (C=2 real), label mask, and per frequency a displacement field
    and the assembled 7-channel curl input. ``missing`` maps subject
    index -> iterable of frequencies to drop; those manifest rows carry '-'
    paths. Returns the manifest path.
    """
    os.makedirs(out_dir, exist_ok=True)
    missing = {int(k): set(float(f) for f in v) for k, v in (missing or {}).items()}
    manifest_path = os.path.join(out_dir, "manifest.csv")
    lines = []
    for s in range(n_subjects):
        subject_id = f"subj{s:03d}"
        subject_seed = seed * 100003 + s
        rng = np.random.default_rng(subject_seed)
        spec = sample_phantom_spec(grid, rng)
        mu, mask = generate_phantom(spec, subject_seed)
        sdir = os.path.join(out_dir, subject_id)
        os.makedirs(sdir, exist_ok=True)
        target = RealVolume(grid, np.stack([mu.data[0].real, mu.data[0].imag]))
        target_path = os.path.join(sdir, "target.fld")
        mask_path = os.path.join(sdir, "mask.fld")
        write_field(target_path, target)
        write_field(mask_path, mask)
        for f_hz in frequencies:
            # drive profiles depend on the dataset seed and frequency only,
            # so every subject sees the same actuation
            drive_rng = np.random.default_rng(
                (seed * 1000003 + int(round(f_hz * 1000))) % 2**63)
            drive_lo = drive_mix * random_drive(grid, drive_rng)
            drive_lo[1] += 1.0
            if f_hz in missing.get(s, ()):
                lines.append(f"{subject_id},{f_hz:g},-,-,-,-,{subject_seed}")
                continue
            cfg = SolverConfig(omega=2 * np.pi * f_hz, tolerance=tolerance,
                               sponge_strength=sponge_strength)
            u = solve_forward(mu, cfg, spec.density, drive_lo=drive_lo)
            if noise_std > 0:
                scale = noise_std * np.abs(u.data).std()
                noise = rng.normal(size=u.data.shape) + 1j * rng.normal(size=u.data.shape)
                u = ComplexVolume(grid, u.data + scale * noise)
            cu = preprocess.curl(u)
            ci = preprocess.assemble_input(cu, f_hz)
            u_path = os.path.join(sdir, f"displacement_{f_hz:g}hz.fld")
            c_path = os.path.join(sdir, f"curl_{f_hz:g}hz.fld")
            write_field(u_path, u)
            write_field(c_path, ci.volume)
            lines.append(f"{subject_id},{f_hz:g},{u_path},{c_path},"
                         f"{target_path},{mask_path},{subject_seed}")
    with open(manifest_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest_path


def load_manifest(path: str):
    """Parse a manifest into row dicts; missing rows keep '-' placeholders."""
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            sid, f_hz, u_p, c_p, t_p, m_p, sd = line.split(",")
            rows.append({
                "subject_id": sid, "frequency_hz": float(f_hz),
                "displacement_path": u_p, "curl_path": c_p,
                "target_path": t_p, "mask_path": m_p, "seed": int(sd),
                "missing": u_p == "-",
            })
    return rows


def manifest_digest(path: str) -> str:
    """SHA-256 over the manifest plus every file it references."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    for row in load_manifest(path):
        if row["missing"]:
            continue
        for key in ("displacement_path", "curl_path", "target_path", "mask_path"):
            with open(row[key], "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()
