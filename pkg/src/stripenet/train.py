"""Training loop: warmup/step schedule, momentum SGD, logging, checkpoints.

The learning rate warms up exponentially from ``warmup_start`` to ``base_lr``
over the first ``warmup_epochs`` epochs and is multiplied by ``decay_factor``
at each epoch in ``decay_epochs``. Head layers (reduction, feature BN,
classifiers) train at ``head_lr_scale`` times the backbone rate.

Weight decay enters the gradient (g + lambda * w), so a parameter with zero
loss gradient contracts by exactly ``1 - lr * lambda`` per step from rest.

Checkpoints are a directory: ``manifest.json`` records the model
configuration and the tensor names/shapes in order, ``params.bin`` holds the
tensors themselves as shape-headed little-endian blobs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .augment import RSAParams, horizontal_flip, image_rng, random_shift_augment
from .data import Dataset, sample_pk_batch, to_model_batch
from .model import ModelConfig, RMGLModel, build_model, forward_features, total_loss
from .tensor import Tensor, read_tensor, write_tensor

__all__ = [
    "TrainSchedule",
    "TrainConfig",
    "SGD",
    "learning_rate",
    "train_model",
    "TrainResult",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT = "stripe-model-checkpoint-v1"


@dataclass(frozen=True)
class TrainSchedule:
    base_lr: float = 0.01
    warmup_start: float = 1e-5
    warmup_epochs: int = 3
    decay_epochs: tuple[int, ...] = (30, 50)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-3
    head_lr_scale: float = 10.0

    def __post_init__(self):
        if not 0 < self.warmup_start <= self.base_lr:
            raise ValueError("need 0 < warmup_start <= base_lr")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if list(self.decay_epochs) != sorted(self.decay_epochs):
            raise ValueError("decay_epochs must be sorted")


def learning_rate(schedule: TrainSchedule, epoch: int) -> float:
    """Backbone learning rate at the start of an epoch (heads scale on top)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    s = schedule
    if s.warmup_epochs > 0 and epoch < s.warmup_epochs:
        ratio = s.base_lr / s.warmup_start
        return s.warmup_start * ratio ** (epoch / s.warmup_epochs)
    steps = sum(1 for e in s.decay_epochs if epoch >= e)
    return s.base_lr * s.decay_factor**steps


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient.

    ``param_groups`` is a list of (parameters, lr_scale) pairs; each call to
    :meth:`step` takes the current base learning rate.
    """

    def __init__(
        self,
        param_groups: list[tuple[list[Tensor], float]],
        momentum: float = 0.9,
        weight_decay: float = 0.0,
    ):
        self.param_groups = [(list(params), float(scale)) for params, scale in param_groups]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [
            [np.zeros_like(p.data) for p in params] for params, _ in self.param_groups
        ]

    def step(self, lr: float) -> None:
        for (params, scale), velocities in zip(self.param_groups, self._velocity):
            for p, v in zip(params, velocities):
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                g = g + self.weight_decay * p.data
                v *= self.momentum
                v += g
                p.data -= lr * scale * v

    def zero_grad(self) -> None:
        for params, _ in self.param_groups:
            for p in params:
                p.grad = None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_p: int = 4
    batch_k: int = 4
    steps_per_epoch: int = 0  # 0 -> ceil(n_train / (p*k))
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    rsa: RSAParams | None = None
    flip_prob: float = 0.0
    rank1_every: int = 0  # 0 -> final epoch only

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class TrainResult:
    log_rows: list[dict]
    log_path: Path | None
    checkpoint_path: Path | None
    final_rank1: float | None


def _augment_batch(
    images: np.ndarray,
    indices: np.ndarray,
    rsa: RSAParams | None,
    flip_prob: float,
    seed: int,
) -> np.ndarray:
    """Per-image deterministic augmentation keyed by (seed, dataset index)."""
    out = []
    for idx in indices:
        img = images[idx]
        if rsa is not None or flip_prob > 0:
            rng = image_rng(seed, int(idx))
            if flip_prob > 0:
                img = horizontal_flip(img, flip_prob, rng)
            if rsa is not None:
                img = random_shift_augment(img, rsa, rng)
        out.append(img)
    return np.stack(out)


def _log_columns(model: RMGLModel) -> list[str]:
    terms = [f"triplet.b{b}" for b in range(len(model.branches))]
    terms += [f"cls.{key}" for key in model.head_keys]
    return ["epoch", "lr", "total_loss", *terms, "toy_rank1"]


def train_model(
    model: RMGLModel,
    dataset: Dataset,
    config: TrainConfig,
    rng: np.random.Generator,
    *,
    out_dir: str | Path | None = None,
    eval_fn: Callable[[RMGLModel], float] | None = None,
    augment_seed: int = 0,
) -> TrainResult:
    """Run the full schedule over the dataset's train split.

    Writes ``training_log.csv`` and a final ``checkpoint/`` under ``out_dir``
    when given. ``eval_fn`` supplies the rank-1 column (computed on the last
    epoch, or every ``rank1_every`` epochs). A non-finite loss aborts.
    """
    train = dataset.subset("train")
    if len(train) == 0:
        raise ValueError("dataset has no training images")
    classes = np.unique(train.pids)
    if model.config.num_classes != len(classes):
        raise ValueError(
            f"model has {model.config.num_classes} classes but the train split "
            f"holds {len(classes)} identities"
        )
    class_index = np.searchsorted(classes, train.pids)
    batch_size = config.batch_p * config.batch_k
    steps = config.steps_per_epoch or max(1, math.ceil(len(train) / batch_size))
    sched = config.schedule
    optimizer = SGD(
        [
            (list(model.backbone_parameters()), 1.0),
            (list(model.head_parameters()), sched.head_lr_scale),
        ],
        momentum=sched.momentum,
        weight_decay=sched.weight_decay,
    )
    columns = _log_columns(model)
    rows: list[dict] = []
    final_rank1 = None
    for epoch in range(config.epochs):
        lr = learning_rate(sched, epoch)
        model.train()
        sums: dict[str, float] = {}
        total_sum = 0.0
        for step in range(steps):
            indices = sample_pk_batch(train.pids, config.batch_p, config.batch_k, rng)
            images = _augment_batch(
                train.images, indices, config.rsa, config.flip_prob,
                augment_seed + epoch,
            )
            batch = Tensor(to_model_batch(images))
            labels = class_index[indices]
            bundle = forward_features(model, batch)
            loss, breakdown = total_loss(bundle, labels, model.config)
            value = loss.item()
            if not np.isfinite(value):
                raise RuntimeError(
                    f"non-finite loss {value} at epoch {epoch} step {step}; "
                    f"breakdown: {breakdown}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(lr)
            total_sum += value
            for k, v in breakdown.items():
                sums[k] = sums.get(k, 0.0) + v
        row = {"epoch": epoch, "lr": lr, "total_loss": total_sum / steps}
        for k, v in sums.items():
            row[k] = v / steps
        want_rank1 = eval_fn is not None and (
            epoch == config.epochs - 1
            or (config.rank1_every and (epoch + 1) % config.rank1_every == 0)
        )
        if want_rank1:
            final_rank1 = eval_fn(model)
            model.train()
            row["toy_rank1"] = final_rank1
        rows.append(row)
    log_path = checkpoint_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "training_log.csv"
        write_training_log(log_path, rows, columns)
        checkpoint_path = out / "checkpoint"
        save_checkpoint(checkpoint_path, model)
    return TrainResult(rows, log_path, checkpoint_path, final_rank1)


def write_training_log(path: str | Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(row.get(c, "")) for c in columns])


def _format_cell(value) -> str:
    if value == "":
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def save_checkpoint(path: str | Path, model: RMGLModel) -> Path:
    """Write manifest.json (config, head order, tensor names/shapes) + params.bin."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    params = list(model.named_parameters())
    buffers = list(model.named_buffers())
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "head_order": [str(k) for k in model.head_keys],
        "parameters": [{"name": n, "shape": list(t.data.shape)} for n, t in params],
        "buffers": [{"name": n, "shape": list(b.shape)} for n, b in buffers],
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "params.bin", "wb") as fh:
        for _, t in params:
            write_tensor(fh, t.data)
        for _, b in buffers:
            write_tensor(fh, b)
    return out


def load_checkpoint(
    path: str | Path, rng: np.random.Generator | None = None
) -> tuple[RMGLModel, dict]:
    """Rebuild the model a checkpoint describes and restore its tensors."""
    root = Path(path)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format {manifest.get('format')!r}")
    raw = dict(manifest["config"])
    raw["stripe_counts"] = tuple(raw["stripe_counts"])
    config = ModelConfig(**raw)
    model = build_model(config, rng if rng is not None else np.random.default_rng(0))
    state: dict[str, np.ndarray] = {}
    with open(root / "params.bin", "rb") as fh:
        for entry in manifest["parameters"] + manifest["buffers"]:
            arr = read_tensor(fh)
            state[entry["name"]] = arr.reshape(entry["shape"])
        if fh.read(1):
            raise ValueError("trailing bytes after the last checkpoint tensor")
    model.load_state_dict(state)
    head_order = [str(k) for k in model.head_keys]
    if manifest["head_order"] != head_order:
        raise ValueError(
            f"checkpoint head order {manifest['head_order']} does not match "
            f"rebuilt model {head_order}"
        )
    return model, manifest
