"""SGD training loop with full seeded determinism.

One generator (seeded from the config) drives parameter init consumers,
epoch shuffling, augmentation, and the dropblock draws, in a fixed order,
so a rerun with the same seed reproduces the loss curve bit for bit.
Checkpoints are self-describing: architecture, configs, seed, epoch, and
parameters, and round-trip exactly.
"""

import csv
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .backbone import BackboneSpec, DgdmCnn, build_model
from .data import random_crop, random_flip
from .layer import DgdmConfig

__all__ = [
    "TrainConfig",
    "EpochStats",
    "TrainingDiverged",
    "train",
    "stack_images",
    "write_train_log",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT = "dgdm-checkpoint-v1"


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    dtype: str = "float32"
    augment_flip: bool = False
    augment_crop: bool = False

    def __post_init__(self):
        for name in ("learning_rate", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"train.{name} must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("train.epochs and train.batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"train.dtype must be float32 or float64, got {self.dtype}")

    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    train_acc: float


def stack_images(samples, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack a dataset into (images, labels) tensors."""
    import numpy as np

    x = torch.stack([torch.from_numpy(np.ascontiguousarray(s.image)) for s in samples])
    y = torch.tensor([s.label for s in samples], dtype=torch.long)
    return x.to(dtype), y


def train(
    model: DgdmCnn,
    samples,
    cfg: TrainConfig,
    log_path=None,
    checkpoint_path=None,
) -> list[EpochStats]:
    """Optimize the model; returns per-epoch mean loss and accuracy.

    Aborts with TrainingDiverged on a non-finite loss.  Optionally writes
    the CSV training log and the final checkpoint.
    """
    if not samples:
        raise ValueError("training set is empty")
    num_classes = model.spec.num_classes
    bad = [s.image_id for s in samples if not 0 <= s.label < num_classes]
    if bad:
        raise ValueError(f"labels out of range for {num_classes} classes: {bad[:3]}")

    dtype = cfg.torch_dtype()
    model.to(dtype)
    x_all, y_all = stack_images(samples, dtype)
    rng = torch.Generator().manual_seed(cfg.seed)
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=cfg.learning_rate,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )

    n = len(samples)
    stats = []
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(n, generator=rng)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if cfg.augment_flip:
                xb = random_flip(xb, rng)
            if cfg.augment_crop:
                xb = random_crop(xb, rng)
            logits = model(xb, rng=rng)
            loss = F.cross_entropy(logits, yb)
            if not bool(torch.isfinite(loss)):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {start // cfg.batch_size}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += loss.item() * len(idx)
            correct += int((logits.argmax(dim=1) == yb).sum())
        stats.append(EpochStats(epoch, total_loss / n, correct / n))
    model.eval()

    if log_path is not None:
        write_train_log(stats, log_path)
    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path,
            model,
            train_config=cfg,
            epoch=cfg.epochs,
        )
    return stats


def write_train_log(stats, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "train_acc"])
        for row in stats:
            writer.writerow([row.epoch, repr(row.mean_loss), repr(row.train_acc)])


def save_checkpoint(
    path,
    model: DgdmCnn,
    train_config: TrainConfig | None = None,
    epoch: int = 0,
) -> None:
    """Self-describing checkpoint: specs, configs, seed, epoch, parameters."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "backbone_spec": model.spec.to_dict(),
        "dgdm_config": model.dgdm_cfg.to_dict() if model.dgdm_cfg else None,
        "train_config": asdict(train_config) if train_config else None,
        "seed": train_config.seed if train_config else None,
        "epoch": epoch,
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[DgdmCnn, dict]:
    """Rebuild the model from a checkpoint; parameters round-trip exactly."""
    payload = torch.load(path, weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a recognized checkpoint")
    spec = BackboneSpec.from_dict(payload["backbone_spec"])
    dgdm_cfg = (
        DgdmConfig.from_dict(payload["dgdm_config"]) if payload["dgdm_config"] else None
    )
    model = build_model(spec, dgdm_cfg)
    state = payload["state_dict"]
    dtypes = {t.dtype for t in state.values()}
    if dtypes == {torch.float64}:
        model.to(torch.float64)
    model.load_state_dict(state)
    model.eval()
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    return model, meta
