"""Acceptance suite: every test prints one PASS line with its measured
numbers, and the assertions enforce the stated tolerances."""
import os
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from onli import metrics, physics, preprocess
from onli.cli import _predict_records
from onli.fields import (ComplexVolume, Grid3, RealVolume, naive_dftn, fftn,
                         resample_trilinear)
from onli.neuralop import (ModelConfig, SpectralConv3d, build_model,
                           flat_parameters, model_forward,
                           set_flat_parameters)
from onli.train import (GradientTape, TrainConfig, backward, kfold_split,
                        load_samples, relative_l2_loss, train_loop)
from test_neuralop import brute_force_spectral

DESK_MODEL = ModelConfig(layers=3, modes=8, width=12)
DESK_SPADE = ModelConfig(layers=3, modes=8, width=12, spade=True)
VOXEL = 1.5e-3


@pytest.fixture(scope="module")
def homogeneous_solve():
    """One shared 64x32x32 homogeneous forward solve (criteria 3 and 4)."""
    mu_true = 2000.0
    omega = 2 * np.pi * 50.0
    # >= 12 voxels per wavelength
    k = omega * np.sqrt(physics.DEFAULT_DENSITY / mu_true)
    d = (2 * np.pi / k) / 16
    grid = Grid3(64, 32, 32, d, d, d)
    mu = ComplexVolume(grid, np.full((1,) + grid.shape, mu_true + 0j))
    cfg = physics.SolverConfig(omega=omega)
    t0 = time.perf_counter()
    u = physics.solve_forward(mu, cfg)
    elapsed = time.perf_counter() - t0
    return {"grid": grid, "mu_true": mu_true, "omega": omega, "k": k,
            "u": u, "cfg": cfg, "mu": mu, "elapsed": elapsed}


@pytest.fixture(scope="module")
def e2e_study(tmp_path_factory):
    """The scaled end-to-end synthetic study shared by criteria 5 and 6:
    24 subjects at 32^3, three frequencies, 3-fold CV, plain and conditioned
    desk models trained for 50 epochs."""
    torch.set_num_threads(4)
    root = tmp_path_factory.mktemp("e2e")
    grid = Grid3(32, 32, 32, VOXEL, VOXEL, VOXEL)
    manifest = physics.make_dataset(24, str(root / "data"), grid,
                                    frequencies=(30.0, 50.0, 70.0), seed=12)
    rows = physics.load_manifest(manifest)
    samples = load_samples(rows)
    subjects = sorted({s.subject_id for s in samples})
    folds = kfold_split(subjects, k=3, seed=12)
    tc = TrainConfig(epochs=50, seed=0, lr0=3e-3)

    results = {}
    for name, mc in (("plain", DESK_MODEL), ("spade", DESK_SPADE)):
        fold_results = []
        for fold in folds:
            torch.set_num_threads(4)
            result = train_loop(samples, fold, mc, tc,
                                out_dir=str(root / name / f"fold{fold.index}"))
            records = _predict_records(result, samples, fold)
            fold_results.append({"result": result, "records": records})
        results[name] = fold_results
    return {"results": results, "samples": samples, "folds": folds}


class TestAcceptance:
    def test_criterion_1_gradient_correctness(self):
        t0 = time.perf_counter()
        cfg = ModelConfig(layers=1, modes=2, width=2)
        model = build_model(cfg, seed=3, dtype=torch.float64)
        torch.manual_seed(10)
        x = torch.randn(1, 7, 6, 6, 6, dtype=torch.float64)
        tgt = torch.randn(1, 2, 6, 6, 6, dtype=torch.float64)
        tape = GradientTape(model.parameters())
        loss = tape.execute(lambda: relative_l2_loss(model(x), tgt))
        g = backward(tape, loss).numpy()
        theta = flat_parameters(model).clone()
        h = 1e-4
        max_rel = 0.0
        for i in range(theta.numel()):
            up = theta.clone(); up[i] += h
            set_flat_parameters(model, up)
            with torch.no_grad():
                lp = float(relative_l2_loss(model(x), tgt))
            dn = theta.clone(); dn[i] -= h
            set_flat_parameters(model, dn)
            with torch.no_grad():
                lm = float(relative_l2_loss(model(x), tgt))
            fd = (lp - lm) / (2 * h)
            denom = max(abs(fd), abs(g[i]), 1e-10)
            max_rel = max(max_rel, abs(fd - g[i]) / denom)
        elapsed = time.perf_counter() - t0
        assert max_rel < 1e-4
        assert elapsed < 120
        print(f"\n[PASS] criterion 1: gradient check over {theta.numel()} "
              f"parameters, max relative error {max_rel:.3e} < 1e-4 "
              f"({elapsed:.1f} s)")

    def test_criterion_2_spectral_oracle(self, rng):
        torch.manual_seed(2)
        sc = SpectralConv3d(3, 5).double()
        x = torch.randn(2, 3, 16, 16, 16, dtype=torch.float64)
        with torch.no_grad():
            out = sc(x).numpy()
        ref = brute_force_spectral(x.numpy(), sc.weight.detach().numpy(), 5)
        spectral_err = np.abs(out - ref).max()

        g = Grid3(6, 6, 6, 1, 1, 1)
        v = ComplexVolume(g, rng.normal(size=(2, 6, 6, 6))
                          + 1j * rng.normal(size=(2, 6, 6, 6)))
        fft_err = np.abs(fftn(v).data - naive_dftn(v).data).max()
        assert spectral_err < 1e-10
        assert fft_err < 1e-10
        print(f"\n[PASS] criterion 2: spectral conv vs brute force "
              f"{spectral_err:.3e} < 1e-10; fftn vs naive DFT "
              f"{fft_err:.3e} < 1e-10")

    def test_criterion_3_dispersion(self, homogeneous_solve):
        hs = homogeneous_solve
        u = hs["u"].data[1]
        # residual contract
        res = physics.residual_norm(hs["mu"], hs["u"], hs["cfg"])
        # measure the wavelength from the unwrapped phase slope along x,
        # away from the drive and the sponge
        phase = np.unwrap(np.angle(u[:, 16, 16]))
        interior = slice(6, 64 - hs["cfg"].sponge_voxels - 4)
        xs = np.arange(64)[interior] * hs["grid"].dx
        slope = np.polyfit(xs, phase[interior], 1)[0]
        k_meas = abs(slope)
        k_err = abs(k_meas - hs["k"]) / hs["k"]
        assert res <= 1e-8
        assert k_err < 0.03
        assert hs["elapsed"] < 300
        print(f"\n[PASS] criterion 3: dispersion error {100 * k_err:.2f}% < 3%, "
              f"residual {res:.2e} <= 1e-8, solve {hs['elapsed']:.0f} s < 300 s")

    def test_criterion_4_direct_inversion_oracle(self, homogeneous_solve):
        hs = homogeneous_solve
        est, valid = physics.direct_inversion(
            hs["u"], physics.DEFAULT_DENSITY, hs["omega"])
        interior = (slice(6, 64 - hs["cfg"].sponge_voxels - 4),
                    slice(4, -4), slice(4, -4))
        sel = valid[interior]
        med = np.median(est.data[0][interior][sel].real)
        rel = abs(med - hs["mu_true"]) / hs["mu_true"]
        assert rel < 0.05
        print(f"\n[PASS] criterion 4: direct-inversion interior median "
              f"{med:.0f} Pa vs {hs['mu_true']:.0f} Pa true "
              f"({100 * rel:.2f}% < 5%)")

    def test_criterion_5_end_to_end_study(self, e2e_study):
        results = e2e_study["results"]

        # pooled held-out per-region mean storage modulus, conditioned model
        pred_means, true_means, whole_apes = [], [], []
        for fr in results["spade"]:
            for rec in fr["records"]:
                for label in np.unique(rec.mask.labels):
                    sel = rec.mask.labels == label
                    pred_means.append(float(rec.pred.data[0][sel].mean()))
                    true_means.append(float(rec.target.data[0][sel].mean()))
                whole_apes.append(metrics.ape(
                    float(rec.pred.data[0].mean()),
                    float(rec.target.data[0].mean())))
        r = metrics.pearson_r(pred_means, true_means)
        ape_mean = float(np.mean(whole_apes))

        plain_val = float(np.mean(
            [fr["result"].best_val_loss for fr in results["plain"]]))
        spade_val = float(np.mean(
            [fr["result"].best_val_loss for fr in results["spade"]]))

        assert r >= 0.90
        assert ape_mean <= 12.0
        assert spade_val <= plain_val
        print(f"\n[PASS] criterion 5: pooled regional-mean r {r:.3f} >= 0.90, "
              f"whole-volume APE {ape_mean:.1f}% <= 12%, conditioned val L2 "
              f"{spade_val:.3f} <= plain {plain_val:.3f}")

    @staticmethod
    def _trig_resample(data, src_shape, dst_grid, max_mode):
        """Band-limit a periodic cell-centered field to |k| <= max_mode and
        evaluate it exactly on another cell-centered grid (same extent)."""
        F = np.fft.fftn(data, axes=(1, 2, 3))
        ks = [np.fft.fftfreq(n, d=1.0 / n).astype(int) for n in src_shape]
        keep = [np.abs(k) <= max_mode for k in ks]
        ph = []
        for axis in range(3):
            kk = ks[axis][keep[axis]]
            n_dst = dst_grid.shape[axis]
            u = (np.arange(n_dst) + 0.5) * (src_shape[axis] / n_dst) - 0.5
            ph.append(np.exp(2j * np.pi * np.outer(u, kk) / src_shape[axis]))
        out = np.empty((data.shape[0],) + dst_grid.shape)
        for c in range(data.shape[0]):
            Fc = F[c][np.ix_(keep[0], keep[1], keep[2])]
            vals = np.einsum("xyz,ax,by,cz->abc", Fc, ph[0], ph[1], ph[2])
            out[c] = vals.real / np.prod(src_shape)
        return out

    def test_criterion_6_resolution_invariance(self, e2e_study):
        # the same band-limited underlying field — a held-out subject's
        # normalized curl input, truncated to modes <= 5 — sampled at 24^3
        # and 48^3 over the training extent
        fr = e2e_study["results"]["plain"][0]
        result = fr["result"]
        samples = e2e_study["samples"]
        fold = e2e_study["folds"][0]
        s = next(x for x in samples if x.subject_id in set(fold.val_subjects))
        x = preprocess.normalize(s.curl.volume, result.stats, "input")

        extent = 32 * VOXEL
        coarse = Grid3(24, 24, 24, extent / 24, extent / 24, extent / 24)
        fine = Grid3(48, 48, 48, extent / 48, extent / 48, extent / 48)
        v_c = RealVolume(coarse, self._trig_resample(x.data, x.grid.shape,
                                                     coarse, max_mode=5))
        v_f = RealVolume(fine, self._trig_resample(x.data, x.grid.shape,
                                                   fine, max_mode=5))
        out_c = model_forward(result.model, v_c)
        out_f = model_forward(result.model, v_f)
        out_f_c = resample_trilinear(out_f, coarse)
        rel = (np.linalg.norm(out_f_c.data - out_c.data)
               / np.linalg.norm(out_c.data))
        assert rel < 0.05
        print(f"\n[PASS] criterion 6: trained model at 24^3 vs 48^3, "
              f"cross-resolution relative L2 {rel:.4f} < 0.05")

    def test_criterion_7_metric_identities(self, rng):
        g = Grid3(10, 10, 10, 1, 1, 1)
        v = RealVolume(g, rng.normal(size=(1,) + g.shape))
        ssim_self = metrics.ssim3d(v, v)
        assert ssim_self == pytest.approx(1.0, abs=1e-12)

        x = rng.normal(size=20)
        y = rng.normal(size=20)
        affine_dev = abs(metrics.pearson_r(2.5 * x + 3.0, y)
                         - metrics.pearson_r(x, y))
        assert affine_dev < 1e-12

        t = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64)
        unit = float(relative_l2_loss(torch.zeros_like(t), t))
        assert unit == pytest.approx(1.0, abs=1e-12)

        from onli.train import CosineSchedule, cosine_lr
        s = CosineSchedule(t_max=200, lr0=1e-3, lr_min=1e-6)
        assert cosine_lr(s, 0) == pytest.approx(1e-3, rel=1e-12)
        assert cosine_lr(s, 200) == pytest.approx(1e-6, rel=1e-12)

        fixture = [0.270, 0.293, 0.291, 0.289, 0.288,
                   0.289, 0.298, 0.293, 0.281, 0.319]
        fs = metrics.fold_stats(fixture)
        assert round(fs.mean, 3) == 0.291
        assert (round(fs.ci[0], 3), round(fs.ci[1], 3)) == (0.283, 0.299)
        print(f"\n[PASS] criterion 7: ssim(x,x)={ssim_self:.12f}, affine "
              f"invariance dev {affine_dev:.1e}, rel-L2(0,t)={unit:.12f}, "
              f"cosine endpoints exact, pooled fixture mean {fs.mean:.3f} "
              f"CI [{fs.ci[0]:.3f}, {fs.ci[1]:.3f}]")

    def test_criterion_8_inference_latency(self):
        torch.set_num_threads(min(4, os.cpu_count() or 1))
        desk = build_model(DESK_MODEL, seed=0)
        x64 = torch.randn(1, 7, 64, 64, 64)
        with torch.no_grad():
            desk(x64)  # warm-up
            t0 = time.perf_counter()
            desk(x64)
            desk_s = time.perf_counter() - t0

        paper = build_model(ModelConfig(), seed=0)
        xp = torch.randn(1, 7, 160, 160, 80)
        with torch.no_grad():
            t0 = time.perf_counter()
            paper(xp)
            paper_s = time.perf_counter() - t0
        assert desk_s < 1.0
        assert paper_s < 30.0
        print(f"\n[PASS] criterion 8: desk 64^3 forward {desk_s:.2f} s < 1 s, "
              f"paper-scale 160x160x80 forward {paper_s:.1f} s < 30 s")

    def test_criterion_9_bitwise_reproducibility(self, tmp_path):
        env = dict(os.environ, ONLI_THREADS="1")

        def run(args):
            proc = subprocess.run(
                [sys.executable, "-m", "onli.cli"] + args,
                env=env, capture_output=True, text=True, cwd="/root/pkg")
            assert proc.returncode == 0, proc.stderr
            return proc

        artifacts = {}
        for tag in ("a", "b"):
            base = tmp_path / tag
            base.mkdir()
            (base / "gen.cfg").write_text(
                f"out_dir = {base / 'data'}\nn_subjects = 3\n"
                "grid_nx = 16\ngrid_ny = 16\ngrid_nz = 16\n"
                "frequencies = 50\nseed = 21\n")
            run(["generate", "--config", str(base / "gen.cfg")])
            (base / "train.cfg").write_text(
                f"out_dir = {base / 'run'}\n"
                f"dataset = {base / 'data' / 'manifest.csv'}\n"
                "layers = 1\nmodes = 3\nwidth = 4\nepochs = 2\n"
                "folds = 3\nseed = 5\n")
            run(["train", "--config", str(base / "train.cfg"), "--fold", "0"])
            row = physics.load_manifest(str(base / "data" / "manifest.csv"))[0]
            run(["infer",
                 "--checkpoint", str(base / "run" / "fold0_best.ckpt"),
                 "--input", row["curl_path"],
                 "--output", str(base / "pred.fld"),
                 "--stats", str(base / "run" / "fold0_normalizer.txt")])
            artifacts[tag] = {
                "ckpt": (base / "run" / "fold0_best.ckpt").read_bytes(),
                "log": (base / "run" / "fold0_loss.csv").read_bytes(),
                "pred": (base / "pred.fld").read_bytes(),
            }
        assert artifacts["a"]["ckpt"] == artifacts["b"]["ckpt"]
        assert artifacts["a"]["log"] == artifacts["b"]["log"]
        assert artifacts["a"]["pred"] == artifacts["b"]["pred"]
        print("\n[PASS] criterion 9: checkpoints, loss logs, and prediction "
              "files bitwise identical across two seeded single-thread runs")
