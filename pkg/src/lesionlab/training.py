"""Helpers shared by the classifier and segmenter training loops."""

from __future__ import annotations

import os

import numpy as np
import torch
from torch import nn

from .errors import ValidationError
from .imaging import read_image, read_mask, resize_image, resize_mask
from .manifest import DatasetManifest, SampleRecord

# per-channel normalisation applied to uint8 inputs
PIXEL_MEAN = 127.5
PIXEL_SCALE = 64.0


def resolve_device(device: str | int | None = None) -> torch.device:
    """``LESIONLAB_DEVICE`` wins over the configured device.

    Accepts ``cpu``, ``cuda``, ``cuda:N`` or a bare device index ``N``.
    """
    device = os.environ.get("LESIONLAB_DEVICE", device)
    if device is None or device == "":
        return torch.device("cpu")
    device = str(device)
    if device.isdigit():
        device = f"cuda:{device}"
    return torch.device(device)


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """``(N, H, W, 3)`` uint8 -> normalised ``(N, 3, H, W)`` float tensor."""
    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float()
    return (x - PIXEL_MEAN) / PIXEL_SCALE


def load_samples(
    manifest: DatasetManifest,
    records: list[SampleRecord],
    input_size: tuple[int, int],
    with_masks: bool = False,
):
    """Decode and resize the images (and masks) of ``records`` into arrays."""
    images = np.empty((len(records), *input_size, 3), dtype=np.uint8)
    masks = np.empty((len(records), *input_size), dtype=bool) if with_masks else None
    for i, r in enumerate(records):
        images[i] = resize_image(read_image(manifest.image_file(r)), input_size)
        if with_masks:
            masks[i] = resize_mask(read_mask(manifest.mask_file(r)), input_size)
    labels = np.array([r.label for r in records], dtype=np.int64)
    return images, masks, labels


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def flip_batch(rng: np.random.Generator, *arrays: np.ndarray) -> list[np.ndarray]:
    """Random horizontal/vertical flips, applied identically across ``arrays``.

    Every array has the batch on axis 0 and spatial rows/cols on axes 1/2.
    """
    n = arrays[0].shape[0]
    flip_h = rng.random(n) < 0.5
    flip_v = rng.random(n) < 0.5
    out = []
    for a in arrays:
        a = a.copy()
        a[flip_h] = a[flip_h][:, :, ::-1]
        a[flip_v] = a[flip_v][:, ::-1]
        out.append(a)
    return out


def make_optimizer(params, name: str, lr: float, momentum: float, weight_decay: float) -> torch.optim.Optimizer:
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay, nesterov=momentum > 0)
    if name == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    raise ValidationError(f"unknown optimizer {name!r}")


def make_scheduler(optimizer, epochs: int, step_epoch: int | None, gamma: float):
    step = step_epoch if step_epoch else max(1, (2 * epochs) // 3)
    return torch.optim.lr_scheduler.StepLR(optimizer, step_size=step, gamma=gamma)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
