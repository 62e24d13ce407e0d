"""Losses and the two-phase training schedule."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from dsva.ac import concentrate
from dsva.core import ClassAttributeMatrix, Config, InputError, ShapeError, SplitSpec, ValidationError, atomic_write, seeded_rng
from dsva.inference import EvalReport, evaluate
from dsva.model import DSVAModel

log = logging.getLogger(__name__)


def semantic_compatibility_loss(scores: torch.Tensor, target) -> torch.Tensor:
    """Cross-entropy of the true class under a softmax over seen-class scores.

    ``scores`` is ``(C,)`` or ``(B, C)``; batched input returns the batch mean.
    """
    if scores.shape[-1] == 0:
        raise InputError("no seen classes to score against")
    target = torch.as_tensor(target, dtype=torch.long)
    if scores.dim() == 1:
        return -torch.log_softmax(scores, dim=-1)[target]
    return F.cross_entropy(scores, target)


def semantic_regression_loss(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Euclidean distance ``||predicted - target||_2`` (batch mean for 2-d input)."""
    target = torch.as_tensor(target, dtype=predicted.dtype)
    if predicted.shape != target.shape:
        raise ShapeError(f"prediction {tuple(predicted.shape)} vs target {tuple(target.shape)}")
    dist = torch.linalg.vector_norm(predicted - target, dim=-1)
    return dist if dist.dim() == 0 else dist.mean()


class LossParts(NamedTuple):
    total: torch.Tensor
    sc: torch.Tensor
    mse: torch.Tensor
    sc_crop: torch.Tensor
    mse_crop: torch.Tensor
    crops: torch.Tensor
    boxes: list


def branch_losses(model: DSVAModel, images: torch.Tensor, labels: torch.Tensor, class_rows: torch.Tensor):
    out = model(images)
    scores = out.prediction.values @ class_rows.T
    sc = semantic_compatibility_loss(scores, labels)
    mse = semantic_regression_loss(out.prediction.values, class_rows[labels])
    return sc, mse, out


def total_loss(model: DSVAModel, images: torch.Tensor, labels, class_rows: torch.Tensor, lam: float) -> LossParts:
    """Compatibility plus scaled regression loss on the images and on their concentrated crops.

    ``class_rows`` holds the seen-class embeddings (already normalized), one
    row per class, indexed by ``labels``.  Crops are computed from the first
    pass's attention without gradient.
    """
    if lam < 0:
        raise ValidationError("lambda must be >= 0")
    labels = torch.as_tensor(labels, dtype=torch.long)
    class_rows = class_rows.to(model.bank.prototypes.dtype)
    sc, mse, out = branch_losses(model, images, labels, class_rows)
    crops, boxes = concentrate(torch.as_tensor(images, dtype=class_rows.dtype), out.maps, model.grid_side)
    sc_c, mse_c, _ = branch_losses(model, crops, labels, class_rows)
    total = sc + lam * mse + sc_c + lam * mse_c
    return LossParts(total, sc, mse, sc_c, mse_c, crops, boxes)


@torch.no_grad()
def predict_values(model: DSVAModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    dtype = model.bank.prototypes.dtype
    chunks = []
    for start in range(0, len(images), batch_size):
        x = torch.as_tensor(images[start:start + batch_size], dtype=dtype)
        chunks.append(model(x).prediction.values.double().numpy())
    if not chunks:
        return np.zeros((0, model.bank.prototypes.shape[0]))
    return np.concatenate(chunks)


@dataclass
class TrainState:
    model: DSVAModel
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    phase: str = "warmup"
    history: list = field(default_factory=list)


def make_optimizer(model: DSVAModel, config: Config) -> torch.optim.Adam:
    return torch.optim.Adam(
        [
            {"params": [model.bank.prototypes], "name": "prototypes"},
            {"params": model.backbone_parameters(), "name": "backbone"},
        ],
        lr=config.warmup_lr,
        betas=(config.beta1, config.beta2),
    )


def configure_phase(state: TrainState, config: Config) -> None:
    warm = state.epoch < config.warmup_epochs
    state.phase = "warmup" if warm else "main"
    train_backbone = not warm and not config.freeze_backbone
    for p in state.model.backbone_parameters():
        p.requires_grad_(train_backbone)
    for group in state.optimizer.param_groups:
        group["lr"] = config.warmup_lr if warm else config.main_lr


@dataclass
class TrainData:
    images: np.ndarray  # (n, H, W, C) float32
    labels: np.ndarray  # index into split.seen
    test_images: np.ndarray
    test_labels: tuple[str, ...]


def gather_training_data(index, split: SplitSpec) -> TrainData:
    seen_pos = {c: i for i, c in enumerate(split.seen)}
    train_ids, labels = [], []
    for cname in split.seen:
        for image_id in split.train.get(cname, ()):
            actual = index.label(image_id) if image_id in index.entries else None
            if actual is None:
                raise ValidationError(f"training image {image_id!r} is not in the dataset")
            if actual not in seen_pos:
                raise ValidationError(f"training image {image_id!r} belongs to non-seen class {actual!r}")
            train_ids.append(image_id)
            labels.append(seen_pos[actual])
    test_ids = [i for c in split.classes for i in split.test.get(c, ())]
    return TrainData(
        index.load_many(train_ids).astype(np.float32),
        np.array(labels, dtype=np.int64),
        index.load_many(test_ids).astype(np.float32),
        tuple(index.label(i) for i in test_ids),
    )


def run_epoch(state: TrainState, data: TrainData, class_rows: torch.Tensor, config: Config, rng: np.random.Generator) -> dict:
    model, opt = state.model, state.optimizer
    order = rng.permutation(len(data.labels))
    sums = {"total": 0.0, "sc": 0.0, "mse": 0.0, "sc_crop": 0.0, "mse_crop": 0.0}
    batches = [order[i:i + config.batch_size] for i in range(0, len(order), config.batch_size)]
    opt.zero_grad(set_to_none=True)
    for step, idx in enumerate(batches, 1):
        x = torch.from_numpy(data.images[idx])
        parts = total_loss(model, x, torch.from_numpy(data.labels[idx]), class_rows, config.lambda_scale)
        (parts.total / config.grad_accum).backward()
        if step % config.grad_accum == 0 or step == len(batches):
            opt.step()
            opt.zero_grad(set_to_none=True)
        for key in sums:
            sums[key] += float(getattr(parts, key).detach()) * len(idx)
    n = max(len(order), 1)
    return {k: v / n for k, v in sums.items()}


def train(
    index,
    split: SplitSpec,
    classes: ClassAttributeMatrix,
    config: Config,
    out_dir: str | os.PathLike | None = None,
    emit: Callable[[dict], None] | None = None,
    evaluate_every_epoch: bool = True,
    init_encoder=None,
) -> TrainState:
    """Warm up the prototypes with a frozen backbone, then train end to end.

    Per epoch a metrics record is appended to ``state.history`` (and passed to
    ``emit``); with ``out_dir`` a checkpoint is written per epoch plus
    ``metrics.jsonl``.  ``init_encoder`` (an ``Encoder``) replaces the
    randomly initialized backbone weights.
    """
    torch.manual_seed(config.seed)
    normed = classes.normalized(config.class_norm)
    class_rows = torch.as_tensor(normed.rows(split.seen), dtype=torch.float32)
    data = gather_training_data(index, split)
    channels = data.images.shape[-1] if data.images.size else 3
    model = DSVAModel.from_config(config, classes.num_attributes, channels=channels)
    if init_encoder is not None:
        model.encoder.load_state_dict(init_encoder.state_dict())
    state = TrainState(model, make_optimizer(model, config))
    rng = seeded_rng(config.seed).spawn(1)[0]
    out = Path(out_dir) if out_dir is not None else None
    metrics_lines = []
    for epoch in range(config.total_epochs):
        state.epoch = epoch
        configure_phase(state, config)
        model.train()
        losses = run_epoch(state, data, class_rows, config, rng)
        record = {"epoch": epoch + 1, "phase": state.phase, "split": "train", "losses": losses}
        if evaluate_every_epoch and len(data.test_labels):
            model.eval()
            values = predict_values(model, data.test_images)
            report = evaluate(values, data.test_labels, split, normed, config)
            record["metrics"] = {
                "split": "test",
                "zsl_top1": report.zsl_top1,
                "gzsl_seen": report.gzsl_seen,
                "gzsl_unseen": report.gzsl_unseen,
                "harmonic": report.harmonic,
            }
        state.history.append(record)
        metrics_lines.append(json.dumps(record, sort_keys=True))
        if emit is not None:
            emit(record)
        if out is not None:
            model.save(out / "checkpoints" / f"epoch_{epoch + 1:03d}.dsva", config, classes.attribute_names, {"epoch": epoch + 1})
            atomic_write(out / "metrics.jsonl", "\n".join(metrics_lines) + "\n")
    state.epoch = config.total_epochs
    for p in model.parameters():
        p.requires_grad_(True)
    if out is not None:
        model.save(out / "model.dsva", config, classes.attribute_names, {"epoch": state.epoch, "seen": list(split.seen), "unseen": list(split.unseen)})
    return state
