"""Lesion-diagnosis classifier: backbone, global average pooling, linear softmax head."""

from __future__ import annotations

import csv
import copy
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbones import build_backbone
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, state_to_numpy
from .errors import DivergedTraining, ImageTooSmall, ValidationError
from .imaging import resize_image
from .labels import CLASS_CODES, NUM_CLASSES, label_code
from .manifest import ClassWeights, DatasetManifest, compute_class_weights
from .metrics import confusion_matrix, normalized_multiclass_accuracy
from .training import (
    epoch_order,
    flip_batch,
    images_to_tensor,
    load_samples,
    make_optimizer,
    make_scheduler,
    resolve_device,
    seed_everything,
)

PROB_EPS = 1e-7
MIN_INPUT_SIZE = 8


@dataclass
class ClsConfig:
    """Classifier training configuration.

    ``class_weights`` is ``"uniform"``, ``"balanced"`` (inverse-frequency
    weights from the training split) or a :class:`ClassWeights`.
    ``sampling="oversample"`` draws class-balanced epochs instead of weighting
    the loss. ``init_checkpoint`` starts from a previous classifier.
    """

    backbone_id: str = "tiny8"
    epochs: int = 10
    input_size: tuple[int, int] = (64, 64)
    class_weights: str | ClassWeights = "balanced"
    seed: int = 0
    batch_size: int = 16
    optimizer: str = "sgd"
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    step_epoch: int | None = None
    lr_gamma: float = 0.1
    augment: bool = True
    sampling: str = "weighted"
    init_checkpoint: str | None = None
    device: str = "cpu"

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        if isinstance(self.class_weights, dict):
            self.class_weights = ClassWeights.from_json(self.class_weights)
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if len(self.input_size) != 2 or min(self.input_size) <= 0:
            raise ValidationError(f"input_size must be two positive ints, got {self.input_size}")
        if isinstance(self.class_weights, str) and self.class_weights not in ("uniform", "balanced"):
            raise ValidationError(f"class_weights must be 'uniform', 'balanced' or explicit weights")
        if self.sampling not in ("weighted", "oversample"):
            raise ValidationError(f"sampling must be 'weighted' or 'oversample'")

    def to_json(self) -> dict:
        data = asdict(self)
        data["input_size"] = list(self.input_size)
        if isinstance(self.class_weights, ClassWeights):
            data["class_weights"] = self.class_weights.to_json()
        return data

    @classmethod
    def from_json(cls, data: dict) -> "ClsConfig":
        return cls(**data)


@dataclass(frozen=True)
class Prediction:
    probs: np.ndarray
    label: int


class LesionClassifier(nn.Module):
    def __init__(self, backbone_id: str, num_classes: int = NUM_CLASSES):
        super().__init__()
        self.backbone_id = backbone_id
        self.backbone = build_backbone(backbone_id)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(self.backbone.out_channels, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-softmax class scores."""
        return self.fc(torch.flatten(self.pool(self.backbone(x)), 1))


def build_classifier(config: ClsConfig) -> LesionClassifier:
    seed_everything(config.seed)
    model = LesionClassifier(config.backbone_id)
    model.config = config
    if config.init_checkpoint:
        ckpt = load_checkpoint(config.init_checkpoint)
        model.load_state_dict(ckpt.state_dict())
    return model


# ------------------------------------------------------------------- loss


def weighted_cross_entropy(probs, true_label: int, weights: ClassWeights | np.ndarray) -> float:
    """``w[true] * -log(max(p[true], 1e-7))`` for one probability vector."""
    w = weights.as_vector(len(probs)) if isinstance(weights, ClassWeights) else np.asarray(weights, dtype=np.float64)
    p = max(float(probs[true_label]), PROB_EPS)
    return float(w[true_label] * -math.log(p))


def softmax(scores: np.ndarray) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def weighted_cross_entropy_grad(scores: np.ndarray, true_label: int, weights) -> np.ndarray:
    """Gradient of the weighted loss w.r.t. the pre-softmax scores: ``w[t] (p - onehot(t))``."""
    w = weights.as_vector(len(scores)) if isinstance(weights, ClassWeights) else np.asarray(weights, dtype=np.float64)
    g = softmax(scores)
    g[true_label] -= 1.0
    return w[true_label] * g


def weighted_cross_entropy_torch(logits: torch.Tensor, targets: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Batch mean of per-sample weighted cross entropy from logits."""
    log_p = torch.log_softmax(logits, dim=1).clamp_min(math.log(PROB_EPS))
    per_sample = -log_p.gather(1, targets[:, None]).squeeze(1)
    return (weights[targets] * per_sample).mean()


# --------------------------------------------------------------- training


def _resolve_weights(config: ClsConfig, manifest: DatasetManifest) -> ClassWeights:
    if isinstance(config.class_weights, ClassWeights):
        return config.class_weights
    if config.class_weights == "uniform" or config.sampling == "oversample":
        return ClassWeights.uniform()
    train = manifest.split_records("train")
    counts: dict[int, int] = {}
    for r in train:
        counts[r.label] = counts.get(r.label, 0) + 1
    return compute_class_weights(counts)


@torch.no_grad()
def _evaluate(model, images, labels, weights_t, device, batch_size=64):
    model.eval()
    losses, preds = [], []
    for start in range(0, len(images), batch_size):
        x = images_to_tensor(images[start : start + batch_size]).to(device)
        y = torch.from_numpy(labels[start : start + batch_size]).to(device)
        logits = model(x)
        losses.append(weighted_cross_entropy_torch(logits, y, weights_t).item() * len(y))
        preds.append(logits.argmax(1).cpu().numpy())
    preds = np.concatenate(preds)
    cm = confusion_matrix(labels, preds)
    return sum(losses) / len(images), normalized_multiclass_accuracy(cm), preds


def train_classifier(model: LesionClassifier, manifest: DatasetManifest, config: ClsConfig) -> Checkpoint:
    """Train on the ``train`` split, select the best epoch on ``val``.

    The log holds one entry per epoch with the weighted training loss, the
    weighted validation loss and the validation normalised accuracy. The
    returned checkpoint carries the weights of the best validation epoch.
    """
    train_records = manifest.split_records("train")
    val_records = manifest.split_records("val")
    if not train_records or not val_records:
        raise ValidationError("manifest needs non-empty train and val splits")
    device = resolve_device(config.device)
    seed_everything(config.seed)
    model.to(device)

    x_train, _, y_train = load_samples(manifest, train_records, config.input_size)
    x_val, _, y_val = load_samples(manifest, val_records, config.input_size)
    weights = _resolve_weights(config, manifest)
    weights_t = torch.tensor(weights.as_vector(), dtype=torch.float32, device=device)

    optimizer = make_optimizer(model.parameters(), config.optimizer, config.lr, config.momentum, config.weight_decay)
    scheduler = make_scheduler(optimizer, config.epochs, config.step_epoch, config.lr_gamma)
    aug_rng = np.random.default_rng([config.seed, 1])

    log = []
    best_acc, best_state, best_epoch = -1.0, None, -1
    for epoch in range(config.epochs):
        model.train()
        if config.sampling == "oversample":
            p = 1.0 / np.bincount(y_train, minlength=NUM_CLASSES)[y_train]
            order = np.random.default_rng([config.seed, epoch]).choice(len(y_train), len(y_train), p=p / p.sum())
        else:
            order = epoch_order(len(y_train), config.seed, epoch)
        total, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = x_train[idx]
            if config.augment:
                (batch,) = flip_batch(aug_rng, batch)
            x = images_to_tensor(batch).to(device)
            y = torch.from_numpy(y_train[idx]).to(device)
            loss = weighted_cross_entropy_torch(model(x), y, weights_t)
            if not torch.isfinite(loss):
                raise DivergedTraining(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        scheduler.step()
        val_loss, val_acc, _ = _evaluate(model, x_val, y_val, weights_t, device)
        log.append({"epoch": epoch, "loss": total / seen, "val_loss": val_loss, "val_normalized_accuracy": val_acc})
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    return Checkpoint(
        kind="classifier",
        backbone_id=model.backbone_id,
        weights=state_to_numpy(model.state_dict()),
        config=config.to_json(),
        log=log,
        extra={"best_epoch": best_epoch, "class_weights": weights.to_json()},
    )


def load_classifier(path: str | os.PathLike) -> LesionClassifier:
    ckpt = load_checkpoint(path)
    config = ClsConfig.from_json(ckpt.config)
    model = LesionClassifier(ckpt.backbone_id)
    model.load_state_dict(ckpt.state_dict())
    model.config = config
    model.eval()
    return model


# -------------------------------------------------------------- inference


@torch.no_grad()
def predict_probs(model: LesionClassifier, images: list[np.ndarray], batch_size: int = 64) -> np.ndarray:
    """Class probabilities (float64, rows sum to 1) for a list of RGB images."""
    size = model.config.input_size
    for im in images:
        if min(im.shape[:2]) < MIN_INPUT_SIZE:
            raise ImageTooSmall(f"image {im.shape[:2]} smaller than {MIN_INPUT_SIZE}px")
    model.eval()
    device = next(model.parameters()).device
    out = []
    for start in range(0, len(images), batch_size):
        batch = np.stack([resize_image(im, size) for im in images[start : start + batch_size]])
        logits = model(images_to_tensor(batch).to(device)).double().cpu().numpy()
        out.append(softmax(logits))
    return np.concatenate(out) if out else np.empty((0, NUM_CLASSES))


def predict(model: LesionClassifier, image: np.ndarray) -> Prediction:
    probs = predict_probs(model, [image])[0]
    return Prediction(probs=probs, label=int(np.argmax(probs)))


def write_predictions_csv(sample_ids: list[str], probs: np.ndarray, path: str | os.PathLike) -> None:
    """``sample_id,p_MEL,...,p_VASC,pred_code`` rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id"] + [f"p_{c}" for c in CLASS_CODES] + ["pred_code"])
        for sid, p in zip(sample_ids, probs):
            writer.writerow([sid] + [f"{v:.6f}" for v in p] + [label_code(int(np.argmax(p)))])
