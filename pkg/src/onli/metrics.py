"""Quantitative comparison of predicted vs ground-truth moduli.

Regional means, Pearson correlation, absolute percent error, volumetric
SSIM, derived maps (magnitude and damping ratio), fold pooling with
95% confidence intervals, and paired t-tests.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sstats
from scipy.ndimage import correlate1d

from .fields import RealVolume, SegmentationMask

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5          # 11^3 window support
DAMPING_FLOOR = 1.0      # Pa; damping ratio undefined below this storage value
NORMAL_Q975 = 1.959963984540054

MODULUS_NAMES = ("storage", "loss")


class EmptyRegionError(ValueError):
    """Requested region has no voxels in the mask."""


class DegenerateStatisticError(ValueError):
    """Statistic undefined (zero variance, degenerate dynamic range, ...)."""


class IncompletePoolingError(ValueError):
    """Fold pooling was attempted with folds missing."""


@dataclass
class RegionMetrics:
    """Per-subject, per-region record of the three headline metrics."""

    subject_id: str
    frequency_hz: float
    region: str
    modulus: str          # storage | loss
    r: float
    ape: float
    ssim: float

    def __post_init__(self):
        if self.ape < 0:
            raise ValueError("APE must be non-negative")
        if not (-1.0000001 <= self.ssim <= 1.0000001):
            raise ValueError("SSIM out of [-1, 1]")


@dataclass
class FoldStats:
    """Across-fold summary of per-fold mean validation losses."""

    fold_losses: list
    mean: float
    std: float
    ci: tuple

    def __post_init__(self):
        if self.std < 0 or self.ci[0] > self.ci[1]:
            raise ValueError("inconsistent fold statistics")


def regional_means(vol: RealVolume, mask: SegmentationMask, region_label: int,
                   channel: int = 0) -> float:
    """Arithmetic mean of one channel over the voxels carrying the label."""
    sel = mask.labels == region_label
    if not sel.any():
        raise EmptyRegionError(f"no voxels with label {region_label}")
    return float(vol.data[channel][sel].mean())


def pearson_r(x, y) -> float:
    """Standard sample correlation coefficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson_r expects two equal-length 1D samples")
    if x.size < 3:
        raise ValueError("need at least 3 pairs")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0:
        raise DegenerateStatisticError("zero variance in a sample")
    return float((xc * yc).sum() / denom)


def ape(pred_mean: float, gt_mean: float) -> float:
    """Absolute percent error of a predicted mean against ground truth."""
    if gt_mean == 0:
        raise ValueError("ground-truth mean is zero")
    return 100.0 * abs(pred_mean - gt_mean) / abs(gt_mean)


def _gauss_kernel1d(sigma, radius):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _gauss_filter(a, kernel):
    for axis in range(3):
        a = correlate1d(a, kernel, axis=axis, mode="reflect")
    return a


def ssim3d(a: RealVolume, b: RealVolume, mask=None) -> float:
    """Mean local SSIM over the volume (Gaussian window sigma=1.5, 11^3).

    Dynamic range is estimated from ``b`` (ground truth) within the mask.
    With a mask, only window centers inside it contribute to the mean.
    """
    if a.channels != 1 or b.channels != 1:
        raise ValueError("ssim3d expects single-channel volumes")
    if a.grid.shape != b.grid.shape:
        raise ValueError("shape mismatch")
    x = a.data[0].astype(np.float64)
    y = b.data[0].astype(np.float64)
    sel = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not sel.any():
        raise EmptyRegionError("mask selects no voxels")
    dynamic_range = float(y[sel].max() - y[sel].min())
    if dynamic_range == 0:
        raise DegenerateStatisticError("degenerate dynamic range")
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    k = _gauss_kernel1d(SSIM_SIGMA, SSIM_RADIUS)
    mu_x = _gauss_filter(x, k)
    mu_y = _gauss_filter(y, k)
    sxx = _gauss_filter(x * x, k) - mu_x * mu_x
    syy = _gauss_filter(y * y, k) - mu_y * mu_y
    sxy = _gauss_filter(x * y, k) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))
    return float(ssim_map[sel].mean())


def derived_maps(mu: RealVolume):
    """Magnitude and damping-ratio maps from a 2-channel modulus volume.

    Damping is flagged invalid (and zeroed) where the storage modulus sits
    below the floor. Returns {"magnitude", "damping", "damping_valid"}.
    """
    if mu.channels != 2:
        raise ValueError("expected storage/loss channels")
    storage = mu.data[0]
    loss = mu.data[1]
    magnitude = np.sqrt(storage**2 + loss**2)
    valid = storage > DAMPING_FLOOR
    damping = np.where(valid, loss / np.where(valid, 2.0 * storage, 1.0), 0.0)
    return {
        "magnitude": RealVolume(mu.grid, magnitude[None]),
        "damping": RealVolume(mu.grid, damping[None]),
        "damping_valid": valid,
    }


def paired_t_test(a, b):
    """Two-sided paired t-test; returns (t, p) with n-1 degrees of freedom."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("need two equal-length samples with n >= 2")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        raise DegenerateStatisticError("zero-variance differences")
    n = d.size
    t = d.mean() / (sd / np.sqrt(n))
    p = 2.0 * sstats.t.sf(abs(t), n - 1)
    return float(t), float(p)


def fold_stats(fold_losses) -> FoldStats:
    """Across-fold mean, sample std, and normal-quantile 95% CI."""
    losses = [float(x) for x in fold_losses]
    m = float(np.mean(losses))
    if len(losses) < 2:
        return FoldStats(losses, m, 0.0, (m, m))
    s = float(np.std(losses, ddof=1))
    half = NORMAL_Q975 * s / np.sqrt(len(losses))
    return FoldStats(losses, m, s, (m - half, m + half))


@dataclass
class PredictionRecord:
    """One held-out prediction to be pooled into the report."""

    subject_id: str
    frequency_hz: float
    pred: RealVolume      # C=2 storage/loss
    target: RealVolume    # C=2
    mask: SegmentationMask


@dataclass
class FoldResult:
    """Evaluated output of one trained fold."""

    fold: int
    val_loss: float
    predictions: list = field(default_factory=list)


def _channel_vol(v, c):
    return RealVolume(v.grid, v.data[c][None])


def _region_selectors(mask: SegmentationMask):
    sels = {"whole": np.ones(mask.grid.shape, dtype=bool)}
    for label in np.unique(mask.labels):
        sels[f"label{int(label)}"] = mask.labels == label
    return sels


def evaluate_predictions(records, model: str = "model"):
    """Per-record regional metrics plus pooled per-region correlations.

    Returns (rows, pooled) where rows are RegionMetrics with voxelwise r
    inside each region, and pooled maps (region, modulus) -> Pearson r over
    per-record regional means (the scatter-of-means convention).
    """
    rows = []
    means = {}
    for rec in records:
        for region, sel in _region_selectors(rec.mask).items():
            for c, modulus in enumerate(MODULUS_NAMES):
                p = rec.pred.data[c][sel]
                g = rec.target.data[c][sel]
                try:
                    r_vox = pearson_r(p.ravel(), g.ravel())
                except (DegenerateStatisticError, ValueError):
                    r_vox = np.nan
                try:
                    s = ssim3d(_channel_vol(rec.pred, c),
                               _channel_vol(rec.target, c), sel)
                except (DegenerateStatisticError, EmptyRegionError):
                    s = np.nan
                rows.append(RegionMetrics(
                    subject_id=rec.subject_id,
                    frequency_hz=rec.frequency_hz,
                    region=region, modulus=modulus,
                    r=r_vox, ape=ape(float(p.mean()), float(g.mean())),
                    ssim=s))
                means.setdefault((region, modulus), ([], []))
                means[(region, modulus)][0].append(float(p.mean()))
                means[(region, modulus)][1].append(float(g.mean()))
    pooled = {}
    for key, (p_list, g_list) in means.items():
        try:
            pooled[key] = pearson_r(p_list, g_list)
        except (DegenerateStatisticError, ValueError):
            pooled[key] = np.nan
    return rows, pooled


def pool_and_report(fold_results, out_dir: str, expected_folds: int = None):
    """Pool held-out predictions across folds into summary tables.

    ``fold_results`` maps model name -> list of FoldResult. Writes
    metrics.csv (per-record rows), summary.csv (per-region pooled), and
    folds.csv (per-fold losses with mean/std/CI); with >= 2 models also
    significance.csv from paired t-tests on per-record APE. Returns
    (summary_rows, {model: FoldStats}).
    """
    os.makedirs(out_dir, exist_ok=True)
    all_rows = {}
    all_pooled = {}
    stats_by_model = {}
    for model, results in fold_results.items():
        indices = sorted(fr.fold for fr in results)
        want = expected_folds if expected_folds is not None else len(indices)
        if indices != list(range(want)):
            raise IncompletePoolingError(
                f"model {model}: have folds {indices}, expected 0..{want - 1}")
        records = [rec for fr in results for rec in fr.predictions]
        rows, pooled = evaluate_predictions(records, model)
        all_rows[model] = rows
        all_pooled[model] = pooled
        stats_by_model[model] = fold_stats([fr.val_loss for fr in results])

    fold_of = {}
    for model, results in fold_results.items():
        for fr in results:
            for rec in fr.predictions:
                fold_of[(model, rec.subject_id, rec.frequency_hz)] = fr.fold

    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        fh.write("model,fold,subject,frequency,region,modulus,r,ape,ssim\n")
        for model, rows in all_rows.items():
            for row in rows:
                f = fold_of.get((model, row.subject_id, row.frequency_hz), -1)
                fh.write(f"{model},{f},{row.subject_id},{row.frequency_hz:g},"
                         f"{row.region},{row.modulus},{row.r:.6g},"
                         f"{row.ape:.6g},{row.ssim:.6g}\n")

    summary_rows = []
    with open(os.path.join(out_dir, "summary.csv"), "w") as fh:
        fh.write("model,region,modulus,r,ape_mean,ape_std,ssim_mean,ssim_std\n")
        for model, rows in all_rows.items():
            regions = sorted({row.region for row in rows})
            for region in regions:
                for modulus in MODULUS_NAMES:
                    sub = [row for row in rows
                           if row.region == region and row.modulus == modulus]
                    apes = np.array([row.ape for row in sub])
                    ssims = np.array([row.ssim for row in sub])
                    rec = {
                        "model": model, "region": region, "modulus": modulus,
                        "r": all_pooled[model][(region, modulus)],
                        "ape_mean": float(apes.mean()),
                        "ape_std": float(apes.std(ddof=1)) if len(apes) > 1 else 0.0,
                        "ssim_mean": float(np.nanmean(ssims)),
                        "ssim_std": (float(np.nanstd(ssims, ddof=1))
                                     if len(ssims) > 1 else 0.0),
                    }
                    summary_rows.append(rec)
                    fh.write(f"{model},{region},{modulus},{rec['r']:.6g},"
                             f"{rec['ape_mean']:.6g},{rec['ape_std']:.6g},"
                             f"{rec['ssim_mean']:.6g},{rec['ssim_std']:.6g}\n")

    with open(os.path.join(out_dir, "folds.csv"), "w") as fh:
        fh.write("model,fold,val_loss\n")
        for model, fs in stats_by_model.items():
            for i, loss in enumerate(fs.fold_losses):
                fh.write(f"{model},{i},{loss:.6g}\n")
            fh.write(f"{model},mean,{fs.mean:.6g}\n")
            fh.write(f"{model},std,{fs.std:.6g}\n")
            fh.write(f"{model},ci_low,{fs.ci[0]:.6g}\n")
            fh.write(f"{model},ci_high,{fs.ci[1]:.6g}\n")

    models = sorted(fold_results)
    if len(models) >= 2:
        with open(os.path.join(out_dir, "significance.csv"), "w") as fh:
            fh.write("model_a,model_b,region,modulus,t,p\n")
            for i, ma in enumerate(models):
                for mb in models[i + 1:]:
                    keyed_a = {(r.subject_id, r.frequency_hz, r.region,
                                r.modulus): r.ape for r in all_rows[ma]}
                    keyed_b = {(r.subject_id, r.frequency_hz, r.region,
                                r.modulus): r.ape for r in all_rows[mb]}
                    common = sorted(set(keyed_a) & set(keyed_b))
                    regions = sorted({k[2] for k in common})
                    for region in regions:
                        for modulus in MODULUS_NAMES:
                            keys = [k for k in common
                                    if k[2] == region and k[3] == modulus]
                            if len(keys) < 2:
                                continue
                            try:
                                t, p = paired_t_test(
                                    [keyed_a[k] for k in keys],
                                    [keyed_b[k] for k in keys])
                            except DegenerateStatisticError:
                                t, p = np.nan, np.nan
                            fh.write(f"{ma},{mb},{region},{modulus},"
                                     f"{t:.6g},{p:.6g}\n")

    return summary_rows, stats_by_model
