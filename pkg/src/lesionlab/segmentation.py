"""Single-class (lesion vs background) region-proposal instance segmenter.

Architecture: a registered backbone feeds three heads.

* ``rpn`` -- a shared 3x3 conv over the feature map;
* ``roi_cls`` -- 2-way lesion/background scores, one ROI candidate per
  feature cell;
* ``roi_box`` -- per-cell distances to the box edges, as fractions of the
  input size;
* ``mask_head`` -- a full-resolution lesion logit map, refined with a skip
  connection from the input pixels.

At inference the top ``roi_candidates_per_image`` cells are decoded into
boxes and pruned with NMS. Each surviving box takes the mask-head
components that overlap it as its instance mask, and its box is tightened
to that mask.
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn
from torchvision.ops import nms

from .backbones import build_backbone
from .checkpoint import Checkpoint, load_checkpoint, state_to_numpy
from .errors import (
    CheckpointShapeMismatch,
    DivergedTraining,
    ImageTooSmall,
    MissingMasks,
    ValidationError,
)
from .imaging import read_image, read_mask, resize_image, resize_mask
from .manifest import DatasetManifest
from .metrics import jaccard
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

BACKBONE_INITS = ("random", "generic_pretrained", "classifier_transfer")
MIN_IMAGE_SIZE = 16
MIN_TRANSFER_FRACTION = 0.9


@dataclass
class SegConfig:
    roi_candidates_per_image: int = 200
    confidence_threshold: float = 0.9
    epochs: int = 5
    input_size: tuple[int, int] = (64, 64)
    backbone_id: str = "tiny8"
    backbone_init: str = "random"
    classifier_checkpoint: str | None = None
    pretrained_checkpoint: str | None = None
    seed: int = 0
    batch_size: int = 8
    optimizer: str = "sgd"
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    step_epoch: int | None = None
    lr_gamma: float = 0.1
    augment: bool = True
    nms_iou: float = 0.5
    device: str = "cpu"

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        if self.backbone_init not in BACKBONE_INITS:
            raise ValidationError(f"backbone_init must be one of {BACKBONE_INITS}")
        if self.backbone_init == "classifier_transfer" and not self.classifier_checkpoint:
            raise ValidationError("backbone_init=classifier_transfer needs classifier_checkpoint")
        if not 0 < self.confidence_threshold < 1:
            raise ValidationError("confidence_threshold must lie in (0, 1)")
        if self.roi_candidates_per_image < 1:
            raise ValidationError("roi_candidates_per_image must be >= 1")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if min(self.input_size) < MIN_IMAGE_SIZE:
            raise ValidationError(f"input_size must be at least {MIN_IMAGE_SIZE}px")

    def to_json(self) -> dict:
        data = asdict(self)
        data["input_size"] = list(self.input_size)
        return data

    @classmethod
    def from_json(cls, data: dict) -> "SegConfig":
        return cls(**data)


@dataclass
class Detection:
    """One lesion instance.

    ``box`` is ``(row_min, col_min, row_max, col_max)``, inclusive pixel
    coordinates. ``mask`` is full-frame.
    """

    box: tuple[int, int, int, int]
    score: float
    mask: np.ndarray


@dataclass
class TransferReport:
    copied: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    copied_parameters: int = 0
    backbone_parameters: int = 0

    @property
    def copied_fraction(self) -> float:
        return self.copied_parameters / self.backbone_parameters if self.backbone_parameters else 0.0

    def to_json(self) -> dict:
        return {**asdict(self), "copied_fraction": self.copied_fraction}


class LesionSegmenter(nn.Module):
    def __init__(self, backbone_id: str, head_channels: int = 64, mask_channels: int = 32):
        super().__init__()
        self.backbone_id = backbone_id
        self.backbone = build_backbone(backbone_id)
        c = self.backbone.out_channels
        self.stride = self.backbone.stride
        self.rpn = nn.Sequential(nn.Conv2d(c, head_channels, 3, padding=1), nn.ReLU(inplace=True))
        self.roi_cls = nn.Conv2d(head_channels, 2, 1)
        self.roi_box = nn.Conv2d(head_channels, 4, 1)
        self.mask_reduce = nn.Sequential(nn.Conv2d(c, mask_channels, 1), nn.ReLU(inplace=True))
        self.mask_head = nn.Sequential(
            nn.Conv2d(mask_channels + 3, mask_channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(mask_channels, mask_channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(mask_channels, 1, 1),
        )

    def forward(self, x: torch.Tensor):
        """Returns ``(cls_logits [N,2,h,w], box [N,4,h,w] in (0,1), mask_logits [N,H,W])``."""
        feats = self.backbone(x)
        r = self.rpn(feats)
        cls_logits = self.roi_cls(r)
        box = torch.sigmoid(self.roi_box(r))
        m = F.interpolate(self.mask_reduce(feats), size=x.shape[-2:], mode="bilinear", align_corners=False)
        mask_logits = self.mask_head(torch.cat([m, x], dim=1)).squeeze(1)
        return cls_logits, box, mask_logits


def _cell_centers(n_rows: int, n_cols: int, in_h: int, in_w: int):
    sy, sx = in_h / n_rows, in_w / n_cols
    cy = (np.arange(n_rows) + 0.5) * sy - 0.5
    cx = (np.arange(n_cols) + 0.5) * sx - 0.5
    return np.meshgrid(cy, cx, indexing="ij")


def build_seg_model(config: SegConfig) -> LesionSegmenter:
    """Build a segmenter and initialise its backbone per ``config.backbone_init``."""
    seed_everything(config.seed)
    model = LesionSegmenter(config.backbone_id)
    model.config = config
    model.transfer_report = None
    if config.backbone_init == "classifier_transfer":
        model.transfer_report = transfer_backbone_weights(config.classifier_checkpoint, model)
    elif config.backbone_init == "generic_pretrained":
        if config.pretrained_checkpoint:
            ckpt = load_checkpoint(config.pretrained_checkpoint)
            model.backbone.load_state_dict({k[len("backbone."):]: v for k, v in ckpt.state_dict().items() if k.startswith("backbone.")})
        else:
            # registry-provided weights (e.g. torchvision ImageNet weights)
            model.backbone.load_state_dict(build_backbone(config.backbone_id, pretrained=True).state_dict())
    return model


def transfer_backbone_weights(classifier_ckpt: str | os.PathLike, seg_model: LesionSegmenter) -> TransferReport:
    """Copy matching ``backbone.*`` tensors from a classifier checkpoint.

    Tensors are matched by name and shape. Batch-norm buffers are copied
    along with the parameters. The copied fraction counts parameter
    elements only. Raises :class:`CheckpointShapeMismatch` when the
    backbone ids differ or less than 90% of backbone parameters were copied.
    """
    ckpt = load_checkpoint(classifier_ckpt)
    if ckpt.backbone_id != seg_model.backbone_id:
        raise CheckpointShapeMismatch(
            f"checkpoint backbone {ckpt.backbone_id!r} does not match segmenter backbone {seg_model.backbone_id!r}"
        )
    report = TransferReport()
    source = ckpt.state_dict()
    target = seg_model.backbone.state_dict()
    param_names = {name for name, _ in seg_model.backbone.named_parameters()}
    report.backbone_parameters = sum(p.numel() for p in seg_model.backbone.parameters())
    to_load = {}
    for name, tensor in target.items():
        src = source.get("backbone." + name)
        if src is None or src.shape != tensor.shape:
            report.missing.append(name)
            continue
        to_load[name] = src.to(dtype=tensor.dtype)
        report.copied.append(name)
        if name in param_names:
            report.copied_parameters += tensor.numel()
    report.skipped = sorted(k for k in source if not k.startswith("backbone."))
    if report.copied_fraction < MIN_TRANSFER_FRACTION:
        raise CheckpointShapeMismatch(
            f"only {report.copied_fraction:.1%} of backbone parameters matched the checkpoint"
        )
    seg_model.backbone.load_state_dict(to_load, strict=False)
    return report


# --------------------------------------------------------------- training


def _targets(masks: np.ndarray, n_rows: int, n_cols: int):
    """Per-cell objectness labels and normalised box-edge distances."""
    n, in_h, in_w = masks.shape
    cy, cx = _cell_centers(n_rows, n_cols, in_h, in_w)
    iy = np.clip(np.rint(cy).astype(int), 0, in_h - 1)
    ix = np.clip(np.rint(cx).astype(int), 0, in_w - 1)
    labels = np.zeros((n, n_rows, n_cols), dtype=np.int64)
    boxes = np.zeros((n, 4, n_rows, n_cols), dtype=np.float32)
    for i, m in enumerate(masks):
        if not m.any():
            continue
        rows, cols = np.nonzero(m)
        r0, r1, c0, c1 = rows.min(), rows.max(), cols.min(), cols.max()
        pos = m[iy, ix]
        if not pos.any():
            yc, xc = rows.mean(), cols.mean()
            pos = np.zeros_like(pos)
            pos[np.abs(cy[:, 0] - yc).argmin(), np.abs(cx[0] - xc).argmin()] = True
        labels[i][pos] = 1
        boxes[i, 0] = (cy - r0 + 0.5) / in_h
        boxes[i, 1] = (cx - c0 + 0.5) / in_w
        boxes[i, 2] = (r1 - cy + 0.5) / in_h
        boxes[i, 3] = (c1 - cx + 0.5) / in_w
    return labels, np.clip(boxes, 0, 1)


def segmentation_loss(outputs, masks: torch.Tensor, cell_labels: torch.Tensor, cell_boxes: torch.Tensor) -> torch.Tensor:
    cls_logits, box, mask_logits = outputs
    loss_cls = F.cross_entropy(cls_logits, cell_labels)
    pos = cell_labels.bool().unsqueeze(1).expand_as(box)
    loss_box = F.l1_loss(box[pos], cell_boxes[pos]) if pos.any() else box.sum() * 0
    target = masks.float()
    loss_bce = F.binary_cross_entropy_with_logits(mask_logits, target)
    prob = torch.sigmoid(mask_logits)
    inter = (prob * target).sum(dim=(1, 2))
    dice = 1 - (2 * inter + 1) / (prob.sum(dim=(1, 2)) + target.sum(dim=(1, 2)) + 1)
    return loss_cls + 5.0 * loss_box + loss_bce + dice.mean()


def train_segmentation(model: LesionSegmenter, manifest: DatasetManifest, config: SegConfig) -> Checkpoint:
    """Train on the ``train`` split; keep the epoch with the best val mean Jaccard.

    Class labels are ignored: every lesion is the single foreground class.
    """
    train_records = manifest.split_records("train")
    val_records = manifest.split_records("val")
    if not train_records or not val_records:
        raise ValidationError("manifest needs non-empty train and val splits")
    lacking = [r.sample_id for r in train_records + val_records if r.mask_path is None]
    if lacking:
        raise MissingMasks(f"{len(lacking)} record(s) lack masks, e.g. {lacking[:3]}")

    device = resolve_device(config.device)
    seed_everything(config.seed)
    model.to(device)
    x_train, m_train, _ = load_samples(manifest, train_records, config.input_size, with_masks=True)
    val_images = [read_image(manifest.image_file(r)) for r in val_records]
    val_masks = [read_mask(manifest.mask_file(r)) for r in val_records]

    optimizer = make_optimizer(model.parameters(), config.optimizer, config.lr, config.momentum, config.weight_decay)
    scheduler = make_scheduler(optimizer, config.epochs, config.step_epoch, config.lr_gamma)
    aug_rng = np.random.default_rng([config.seed, 1])
    n_rows = config.input_size[0] // model.stride
    n_cols = config.input_size[1] // model.stride

    log = []
    best, best_state, best_epoch = -1.0, None, -1
    for epoch in range(config.epochs):
        model.train()
        order = epoch_order(len(x_train), config.seed, epoch)
        total, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            images, masks = x_train[idx], m_train[idx]
            if config.augment:
                images, masks = flip_batch(aug_rng, images, masks)
            x = images_to_tensor(images).to(device)
            outputs = model(x)
            labels, boxes = _targets(masks, *outputs[0].shape[-2:])
            loss = segmentation_loss(
                outputs,
                torch.from_numpy(masks).to(device),
                torch.from_numpy(labels).to(device),
                torch.from_numpy(boxes).to(device),
            )
            if not torch.isfinite(loss):
                raise DivergedTraining(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        scheduler.step()
        scores = [
            jaccard(select_primary_mask(infer_detections(model, im), im.shape[:2], config.confidence_threshold), gt)
            for im, gt in zip(val_images, val_masks)
        ]
        val_j = float(np.mean(scores))
        log.append({"epoch": epoch, "loss": total / seen, "val_mean_jaccard": val_j})
        if val_j > best:
            best, best_epoch = val_j, epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    extra = {"best_epoch": best_epoch}
    if getattr(model, "transfer_report", None) is not None:
        extra["transfer"] = model.transfer_report.to_json()
    return Checkpoint(
        kind="segmenter",
        backbone_id=model.backbone_id,
        weights=state_to_numpy(model.state_dict()),
        config=config.to_json(),
        log=log,
        extra=extra,
    )


def load_segmenter(path: str | os.PathLike) -> LesionSegmenter:
    ckpt = load_checkpoint(path)
    config = SegConfig.from_json(ckpt.config)
    model = LesionSegmenter(ckpt.backbone_id)
    model.load_state_dict(ckpt.state_dict())
    model.config = config
    model.transfer_report = None
    model.eval()
    return model


# -------------------------------------------------------------- inference


def _tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


@torch.no_grad()
def infer_detections(model: LesionSegmenter, image: np.ndarray) -> list[Detection]:
    """All detections for one RGB image, sorted by score (descending).

    No confidence threshold is applied here.
    """
    h, w = image.shape[:2]
    if min(h, w) < MIN_IMAGE_SIZE:
        raise ImageTooSmall(f"image {h}x{w} is smaller than {MIN_IMAGE_SIZE}px")
    config = model.config
    in_h, in_w = config.input_size
    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    x = images_to_tensor(resize_image(image, (in_h, in_w))[None]).to(device)
    cls_logits, box, mask_logits = model(x)
    if was_training:
        model.train()

    scores = torch.softmax(cls_logits[0].double(), dim=0)[1].cpu().numpy()
    dist = box[0].double().cpu().numpy()
    pixel_mask = (mask_logits[0] > 0).cpu().numpy()
    n_rows, n_cols = scores.shape
    cy, cx = _cell_centers(n_rows, n_cols, in_h, in_w)

    flat = scores.ravel()
    k = min(config.roi_candidates_per_image, flat.size)
    top = np.argsort(-flat, kind="stable")[:k]
    rows0 = cy.ravel()[top] - dist[0].ravel()[top] * in_h
    cols0 = cx.ravel()[top] - dist[1].ravel()[top] * in_w
    rows1 = cy.ravel()[top] + dist[2].ravel()[top] * in_h
    cols1 = cx.ravel()[top] + dist[3].ravel()[top] * in_w
    boxes = np.stack([cols0, rows0, cols1, rows1], axis=1).clip(0, [in_w - 1, in_h - 1, in_w - 1, in_h - 1])
    keep = nms(torch.from_numpy(boxes), torch.from_numpy(flat[top]), config.nms_iou).numpy()

    components, _ = ndimage.label(pixel_mask, structure=np.ones((3, 3), dtype=bool))
    detections: list[Detection] = []
    seen_masks: set[bytes] = set()
    for i in keep:
        c0, r0, c1, r1 = boxes[i]
        r0, c0 = int(np.floor(r0)), int(np.floor(c0))
        r1, c1 = int(np.ceil(r1)), int(np.ceil(c1))
        ids = np.unique(components[r0 : r1 + 1, c0 : c1 + 1])
        ids = ids[ids > 0]
        if ids.size == 0:
            continue
        inst = np.isin(components, ids)
        full = resize_mask(inst, (h, w))
        if not full.any():
            continue
        key = np.packbits(full).tobytes()
        if key in seen_masks:
            continue
        seen_masks.add(key)
        detections.append(Detection(box=_tight_box(full), score=float(flat[top[i]]), mask=full))
    detections.sort(key=lambda d: -d.score)
    return detections


def select_primary_mask(detections: list[Detection], image_size: tuple[int, int], threshold: float) -> np.ndarray:
    """Mask of the best detection scoring at least ``threshold``.

    Falls back to the best detection below threshold, and to an
    all-foreground mask when there are no detections.
    """
    if not 0 < threshold < 1:
        raise ValidationError("threshold must lie in (0, 1)")
    if not detections:
        return np.ones(image_size, dtype=bool)
    confident = [d for d in detections if d.score >= threshold]
    best = max(confident or detections, key=lambda d: d.score)
    return best.mask.copy()


def predict_masks(model: LesionSegmenter, manifest: DatasetManifest):
    """Yield ``(record, detections, primary_mask)`` for every record."""
    for r in manifest.records:
        image = read_image(manifest.image_file(r))
        dets = infer_detections(model, image)
        yield r, dets, select_primary_mask(dets, image.shape[:2], model.config.confidence_threshold)
