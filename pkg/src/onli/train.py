"""Training machinery: gradient tape over the operator network, relative-L2
loss, Adam with decoupled weight decay, cosine-annealed learning rate,
per-subject fold splitting, and the training loop.

The reverse-mode engine is torch autograd behind a thin tape contract; the
analytic gradients it returns are cross-checked against central finite
differences in the test suite.
"""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from . import preprocess
from .fields import RealVolume, SegmentationMask, read_field
from .neuralop import (ModelConfig, OperatorModel, build_model,
                       flat_parameters, save_checkpoint, set_flat_parameters)
from .preprocess import CurlInput, NormalizerStats


class ContractError(ValueError):
    """Tape misuse: the recorded computation is not a differentiable scalar."""


class PoisonedGradientError(ValueError):
    """Non-finite gradients; the optimizer step is refused."""


class ZeroNormTargetError(ValueError):
    """Relative L2 loss is undefined for a zero-norm target."""


class DivergenceError(RuntimeError):
    """Training loss went non-finite; carries the last good checkpoint path."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class GradientTape:
    """Records a scalar-valued computation over the watched parameters.

    ``execute`` runs the closure while autograd records the operation graph;
    ``backward`` plays the adjoint once per recorded node, in reverse
    topological order, and returns the flat gradient vector.
    """

    def __init__(self, parameters):
        self.parameters = [p for p in parameters]
        for p in self.parameters:
            p.requires_grad_(True)
        self.loss = None

    def execute(self, compute):
        self.loss = compute()
        return self.loss


def backward(tape: GradientTape, loss: torch.Tensor) -> torch.Tensor:
    """Gradient of a recorded scalar loss w.r.t. every watched parameter."""
    if not torch.is_tensor(loss) or loss.numel() != 1:
        raise ContractError("tape root must be a scalar tensor")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to the watched parameters")
    grads = torch.autograd.grad(loss, tape.parameters, allow_unused=True)
    flat = []
    for p, g in zip(tape.parameters, grads):
        flat.append(torch.zeros_like(p).reshape(-1) if g is None
                    else g.reshape(-1))
    return torch.cat(flat)


def relative_l2_loss(pred, target):
    """Batch-mean of ||pred_i - target_i||_2 / ||target_i||_2.

    Accepts torch tensors (differentiable, scalar tensor returned) or numpy
    arrays (float returned); leading axis is the batch.
    """
    if isinstance(pred, np.ndarray):
        return float(relative_l2_loss(torch.from_numpy(pred),
                                      torch.from_numpy(np.asarray(target))))
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    b = pred.shape[0]
    diff = (pred - target).reshape(b, -1)
    tnorm = target.reshape(b, -1).norm(dim=1)
    if bool((tnorm == 0).any()):
        raise ZeroNormTargetError("target with zero L2 norm in batch")
    return (diff.norm(dim=1) / tnorm).mean()


@dataclass
class AdamState:
    """Optimizer state aligned to the flat parameter vector."""

    m: torch.Tensor
    v: torch.Tensor
    step: int = 0
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4

    @classmethod
    def init(cls, n, dtype=torch.float32, **kw):
        return cls(m=torch.zeros(n, dtype=dtype),
                   v=torch.zeros(n, dtype=dtype), **kw)


def adam_step(state: AdamState, params: torch.Tensor, grads: torch.Tensor,
              lr: float) -> torch.Tensor:
    """One Adam update with bias correction and decoupled weight decay.

    Weight decay shrinks the parameters before the Adam delta is applied.
    Mutates the state, returns the new parameter vector.
    """
    if params.numel() != grads.numel() or params.numel() != state.m.numel():
        raise ValueError("parameter/gradient/state length mismatch")
    if not torch.isfinite(grads).all():
        raise PoisonedGradientError("non-finite gradient; step refused")
    state.step += 1
    t = state.step
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1**t)
    v_hat = state.v / (1 - state.beta2**t)
    out = params * (1 - lr * state.weight_decay)
    return out - lr * m_hat / (torch.sqrt(v_hat) + state.eps)


@dataclass
class CosineSchedule:
    """Half-cosine decay from lr0 to lr_min over t_max steps."""

    t_max: int
    lr0: float = 1e-3
    lr_min: float = 0.0


def cosine_lr(schedule: CosineSchedule, t) -> float:
    if t < 0 or t > schedule.t_max:
        warnings.warn(f"step {t} outside [0, {schedule.t_max}]; clamping")
        t = min(max(t, 0), schedule.t_max)
    return schedule.lr_min + 0.5 * (schedule.lr0 - schedule.lr_min) * (
        1.0 + np.cos(np.pi * t / schedule.t_max))


@dataclass
class FoldSplit:
    """One cross-validation fold; subjects never straddle the split."""

    index: int
    train_subjects: list
    val_subjects: list

    def __post_init__(self):
        if set(self.train_subjects) & set(self.val_subjects):
            raise ValueError("train and validation subjects overlap")


def kfold_split(subject_ids, k: int = 10, seed: int = 0):
    """Seeded per-subject k-fold partition with fold sizes differing by <= 1."""
    subject_ids = list(subject_ids)
    if k > len(subject_ids):
        raise ValueError(f"k={k} exceeds {len(subject_ids)} subjects")
    rng = np.random.default_rng(seed)
    order = [subject_ids[i] for i in rng.permutation(len(subject_ids))]
    chunks = np.array_split(np.arange(len(order)), k)
    folds = []
    for f, chunk in enumerate(chunks):
        val = sorted(order[i] for i in chunk)
        train = sorted(s for s in subject_ids if s not in set(val))
        folds.append(FoldSplit(f, train, val))
    return folds


@dataclass
class Sample:
    """One training example: curl input, target moduli, optional mask."""

    subject_id: str
    frequency_hz: float
    curl: CurlInput
    target: RealVolume
    mask: SegmentationMask = None


def load_samples(manifest_rows):
    """Materialize Samples from physics.load_manifest rows (skips missing)."""
    samples = []
    for row in manifest_rows:
        if row["missing"]:
            continue
        vol = read_field(row["curl_path"])
        samples.append(Sample(
            subject_id=row["subject_id"],
            frequency_hz=row["frequency_hz"],
            curl=CurlInput(vol, row["frequency_hz"]),
            target=read_field(row["target_path"]),
            mask=read_field(row["mask_path"]),
        ))
    return samples


@dataclass
class TrainConfig:
    """Loop hyperparameters (paper-style defaults)."""

    epochs: int = 50
    batch_size: int = 1
    lr0: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    seed: int = 0
    dtype: str = "float32"


@dataclass
class TrainResult:
    model: OperatorModel
    history: list               # rows: dict(epoch, train_loss, val_loss, lr)
    stats: NormalizerStats
    best_epoch: int
    best_val_loss: float
    loss_log_path: str = None
    best_checkpoint_path: str = None
    last_checkpoint_path: str = None


def _to_tensors(samples, stats, dtype, spade):
    xs, ys, ms = [], [], []
    for s in samples:
        x = preprocess.normalize(s.curl.volume, stats, "input").data
        y = preprocess.normalize(s.target, stats, "target").data
        xs.append(torch.from_numpy(x).to(dtype))
        ys.append(torch.from_numpy(y).to(dtype))
        if spade:
            if s.mask is None:
                raise ValueError(f"sample {s.subject_id} lacks a mask")
            ms.append(torch.from_numpy(s.mask.one_hot()).to(dtype))
        else:
            ms.append(None)
    return xs, ys, ms


def _epoch_loss(model, batches, stats, dtype):
    """Mean relative L2 over samples, in denormalized target units."""
    std = torch.from_numpy(stats.target_std).to(dtype)[None, :, None, None, None]
    mean = torch.from_numpy(stats.target_mean).to(dtype)[None, :, None, None, None]
    total, count = 0.0, 0
    with torch.no_grad():
        for x, y, m in batches:
            pred = model(x, m)
            total += float(relative_l2_loss(pred * std + mean, y * std + mean)) * x.shape[0]
            count += x.shape[0]
    return total / count


def train_loop(samples, fold: FoldSplit, model_config: ModelConfig,
               train_config: TrainConfig, out_dir: str = None) -> TrainResult:
    """Train on the fold's training subjects, validate on its held-out side.

    The normalizer is fitted on training samples only. Returns the model
    re-loaded with the best-validation-loss parameters plus the full loss
    history. With a fixed seed and fixed thread count the history and
    checkpoints are bitwise reproducible.
    """
    dtype = getattr(torch, train_config.dtype)
    train_samples = [s for s in samples if s.subject_id in set(fold.train_subjects)]
    val_samples = [s for s in samples if s.subject_id in set(fold.val_subjects)]
    if not train_samples or not val_samples:
        raise ValueError("fold has an empty training or validation side")

    stats = preprocess.fit_normalizer(
        [s.curl for s in train_samples], [s.target for s in train_samples])
    xs, ys, ms = _to_tensors(train_samples, stats, dtype, model_config.spade)
    val_xs, val_ys, val_ms = _to_tensors(val_samples, stats, dtype,
                                         model_config.spade)

    def batches(x_list, y_list, m_list, order):
        bs = train_config.batch_size
        for i in range(0, len(order), bs):
            sel = order[i:i + bs]
            x = torch.stack([x_list[j] for j in sel])
            y = torch.stack([y_list[j] for j in sel])
            m = (torch.stack([m_list[j] for j in sel])
                 if m_list[sel[0]] is not None else None)
            yield x, y, m

    model = build_model(model_config, seed=train_config.seed, dtype=dtype)
    params = list(model.parameters())
    tape = GradientTape(params)
    flat = flat_parameters(model).clone()
    state = AdamState.init(flat.numel(), dtype=dtype,
                           lr0=train_config.lr0,
                           weight_decay=train_config.weight_decay)
    steps_per_epoch = max(len(train_samples) // train_config.batch_size, 1)
    schedule = CosineSchedule(t_max=train_config.epochs * steps_per_epoch,
                              lr0=train_config.lr0, lr_min=train_config.lr_min)

    rng = np.random.default_rng(train_config.seed)
    history = []
    best_val = np.inf
    best_epoch = -1
    best_flat = flat.clone()
    step = 0
    last_path = best_path = log_path = None

    def checkpoint(name, vec):
        if out_dir is None:
            return None
        path = os.path.join(out_dir, name)
        set_flat_parameters(model, vec)
        save_checkpoint(path, model)
        return path

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    val_batches = list(batches(val_xs, val_ys, val_ms, list(range(len(val_samples)))))
    for epoch in range(train_config.epochs):
        order = list(rng.permutation(len(train_samples)))
        lr = train_config.lr0
        for x, y, m in batches(xs, ys, ms, order):
            lr = cosine_lr(schedule, step)
            loss = tape.execute(lambda: relative_l2_loss(model(x, m), y))
            if not torch.isfinite(loss):
                path = checkpoint(f"fold{fold.index}_epoch{epoch}.ckpt", best_flat)
                raise DivergenceError(
                    f"loss went non-finite at epoch {epoch}", path)
            grads = backward(tape, loss)
            flat = adam_step(state, flat, grads, lr)
            set_flat_parameters(model, flat)
            step += 1
        train_loss = _epoch_loss(model, batches(xs, ys, ms,
                                                list(range(len(train_samples)))),
                                 stats, dtype)
        val_loss = _epoch_loss(model, val_batches, stats, dtype)
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss, "lr": lr})
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_flat = flat.clone()

    if out_dir is not None:
        last_path = checkpoint(
            f"fold{fold.index}_epoch{train_config.epochs - 1}.ckpt", flat)
        best_path = checkpoint(f"fold{fold.index}_best.ckpt", best_flat)
        log_path = os.path.join(out_dir, f"fold{fold.index}_loss.csv")
        write_loss_log(log_path, history)

    set_flat_parameters(model, best_flat)
    return TrainResult(model=model, history=history, stats=stats,
                       best_epoch=best_epoch, best_val_loss=best_val,
                       loss_log_path=log_path,
                       best_checkpoint_path=best_path,
                       last_checkpoint_path=last_path)


def write_loss_log(path, history) -> None:
    """CSV loss log: epoch,train_loss,val_loss,lr at 6 significant digits."""
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss,lr\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['train_loss']:.6g},"
                     f"{row['val_loss']:.6g},{row['lr']:.6g}\n")
