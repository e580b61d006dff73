"""Per-fold training, fine-tuning and the per-epoch history."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ..data.augment import PAPER_PATCH, AugmentationConfig, augment, sample_patch
from ..data.folds import FoldAssignment
from ..data.volume import VolumeSample
from ..errors import ConfigError, TrainingDivergedError
from ..metrics import dice_loss, evaluate_masks
from ..rng import Rng
from ..tensor import Tape, Tensor, backward
from ..tensor.ops import sigmoid
from ..unet import TINY_CONFIG, Checkpoint, UNet3D, UNetConfig, build
from .inference import sliding_window_predict, threshold
from .optim import OptimizerState, adamw_step, onecycle_lr

HISTORY_FIELDS = ("epoch", "lr", "train_soft_dsc", "val_dsc", "val_hd_score", "val_composite")


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters. The defaults are the full-scale schedule."""

    batch_size: int = 4
    epochs_run1: int = 120
    epochs_run2: int = 40
    lr_init_run1: float = 5e-4
    lr_init_run2: float = 3e-4
    lr_min: float = 1e-4
    patch_size: tuple[int, int, int] = PAPER_PATCH
    loss: str = "dice"
    seed: int = 0
    weight_decay: float = 1e-2
    warmup_fraction: float = 0.3
    div_factor: float = 25.0
    patches_per_volume: int = 1
    validate_every: int = 1
    checkpoint_every: int = 0
    val_overlap: float = 0.5
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.loss != "dice":
            raise ConfigError(f"unsupported loss {self.loss!r}; only 'dice' is implemented")
        if self.epochs_run1 <= 0 or self.epochs_run2 < 0:
            raise ConfigError("epochs_run1 must be positive and epochs_run2 non-negative")
        for name in ("lr_init_run1", "lr_init_run2"):
            if self.lr_min > getattr(self, name):
                raise ConfigError(f"lr_min {self.lr_min} exceeds {name} {getattr(self, name)}")
        if self.batch_size < 1 or self.patches_per_volume < 1 or self.validate_every < 1:
            raise ConfigError("batch_size, patches_per_volume and validate_every must be >= 1")
        if len(self.patch_size) != 3:
            raise ConfigError("patch_size needs three extents")


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    history: list[dict]
    snapshots: list[Checkpoint] = field(default_factory=list)


def write_history(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: _fmt(row[k]) for k in HISTORY_FIELDS})


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (int(r[k]) if k == "epoch" else (float(r[k]) if r[k] else float("nan"))) for k in HISTORY_FIELDS})
    return out


def validate_model(model: UNet3D, volumes: Sequence[VolumeSample], patch_size, overlap: float) -> dict:
    """Mean DSC, Hausdorff score and composite over ``volumes``."""
    if not volumes:
        return {"val_dsc": float("nan"), "val_hd_score": float("nan"), "val_composite": float("nan")}
    reports = []
    for v in volumes:
        probs = sliding_window_predict(model, v.image, patch_size, overlap)
        reports.append(evaluate_masks(threshold(probs), v.mask, spacing=v.spacing))
    return {
        "val_dsc": float(np.mean([r.mean_dsc for r in reports])),
        "val_hd_score": float(np.mean([r.mean_hausdorff_score for r in reports])),
        "val_composite": float(np.mean([r.composite for r in reports])),
    }


def _batch(volumes, idx, epoch, slot0, config: TrainConfig, rng: Rng):
    imgs, masks = [], []
    for slot, i in enumerate(idx, start=slot0):
        v = volumes[i]
        r = rng.split("patch", v.case_id, v.day, epoch, slot)
        img, msk = sample_patch(v.image, v.mask, config.patch_size, r.split("crop"))
        img, msk = augment(img, msk, config.augmentation, r.split("augment"))
        imgs.append(img)
        masks.append(msk)
    return np.stack(imgs), np.stack(masks)


def train_steps(
    model: UNet3D,
    train_vols: Sequence[VolumeSample],
    val_vols: Sequence[VolumeSample],
    epochs: int,
    lr_peak: float,
    config: TrainConfig,
    rng: Rng,
    extra: Optional[dict] = None,
) -> TrainResult:
    """Run ``epochs`` epochs of dice-loss training on ``model`` in place."""
    if not train_vols:
        raise ValueError("no training volumes")
    per_epoch = len(train_vols) * config.patches_per_volume
    steps_per_epoch = math.ceil(per_epoch / config.batch_size)
    total = epochs * steps_per_epoch
    state = OptimizerState(weight_decay=config.weight_decay)
    history: list[dict] = []
    snapshots: list[Checkpoint] = []
    best: Optional[Checkpoint] = None
    best_score = -math.inf
    extra = dict(extra or {})
    step = 0
    for epoch in range(epochs):
        order = np.tile(np.arange(len(train_vols)), config.patches_per_volume)
        order = order[rng.split("order", epoch).permutation(len(order))]
        scores = []
        lr = float("nan")
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            x, y = _batch(train_vols, idx, epoch, b * config.batch_size, config, rng)
            lr = onecycle_lr(step, total, lr_peak, config.lr_min, config.warmup_fraction, config.div_factor)
            with Tape() as tape:
                logits = model.forward(Tensor(x, dtype=model.dtype), training=True, rng=rng.split("dropout", step))
                loss = dice_loss(sigmoid(logits), y)
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError(f"loss became {loss.item()} at step {step}", step=step)
            grads = backward(tape, loss)
            names = list(model.params)
            new, state = adamw_step(
                {k: model.params[k].data for k in names}, {k: grads[model.params[k]] for k in names}, state, lr
            )
            for k in names:
                model.params[k] = Tensor(new[k], requires_grad=True, name=k)
            scores.append(1.0 - loss.item())
            step += 1
        row = {"epoch": epoch, "lr": lr, "train_soft_dsc": float(np.mean(scores))}
        last = epoch == epochs - 1
        if val_vols and ((epoch + 1) % config.validate_every == 0 or last):
            row.update(validate_model(model, val_vols, config.patch_size, config.val_overlap))
        else:
            row.update({"val_dsc": float("nan"), "val_hd_score": float("nan"), "val_composite": float("nan")})
        history.append(row)
        ck = Checkpoint.from_model(model, optimizer_state=state, epoch=epoch + 1, rng_seed=config.seed, extra=extra)
        if not math.isnan(row["val_composite"]) and row["val_composite"] > best_score:
            best_score = row["val_composite"]
            best = replace(ck, extra={**extra, "val_composite": best_score})
        if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            snapshots.append(ck)
    final = Checkpoint.from_model(model, optimizer_state=state, epoch=epochs, rng_seed=config.seed, extra=extra)
    return TrainResult(best if best is not None else final, final, history, snapshots)


def split_volumes(volumes: Sequence[VolumeSample], folds: FoldAssignment, fold_id: int):
    if not 0 <= fold_id < folds.k:
        raise ValueError(f"fold {fold_id} outside [0, {folds.k})")
    missing = sorted({v.case_id for v in volumes} - set(folds.fold_of))
    if missing:
        raise ValueError(f"cases without a fold: {missing}")
    val = [v for v in volumes if folds.fold_of[v.case_id] == fold_id]
    train = [v for v in volumes if folds.fold_of[v.case_id] != fold_id]
    return train, val


def train_fold(
    fold_id: int,
    folds: FoldAssignment,
    volumes: Sequence[VolumeSample],
    config: TrainConfig,
    rng: Optional[Rng] = None,
    model_config: UNetConfig = TINY_CONFIG,
) -> TrainResult:
    """First training run of one fold, keeping the best-validation checkpoint."""
    if not volumes:
        raise ValueError("dataset is empty")
    rng = Rng(config.seed).split("fold", fold_id) if rng is None else rng
    train, val = split_volumes(volumes, folds, fold_id)
    model = build(model_config, rng.split("init"))
    return train_steps(
        model, train, val, config.epochs_run1, config.lr_init_run1, config, rng.split("run1"), extra={"fold": fold_id}
    )


def finetune(
    checkpoint: Checkpoint,
    config: TrainConfig,
    train_vols: Sequence[VolumeSample],
    val_vols: Sequence[VolumeSample] = (),
    rng: Optional[Rng] = None,
) -> TrainResult:
    """Second run: resume weights, fresh optimizer, lower one-cycle peak."""
    if train_vols and train_vols[0].image.shape[0] != checkpoint.config.in_channels:
        raise ConfigError("checkpoint input channels do not match the dataset")
    if config.epochs_run2 == 0:
        return TrainResult(checkpoint, checkpoint, [])
    rng = Rng(config.seed).split("finetune") if rng is None else rng
    model = checkpoint.to_model()
    return train_steps(
        model, train_vols, val_vols, config.epochs_run2, config.lr_init_run2, config, rng, extra=dict(checkpoint.extra)
    )
