"""Segmentation-guided cropping of classification corpora."""

from __future__ import annotations

import json
import math
import os
import shutil
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import IoFailure, MissingPredictedMask, ValidationError
from .imaging import read_image, read_mask, write_image
from .manifest import DEFAULT_MASK_SUFFIX, DatasetManifest, write_labels_csv, write_manifest

BBox = tuple[int, int, int, int]


@dataclass(frozen=True)
class CropPolicy:
    margin_fraction: float = 0.1
    min_crop_size: int = 32
    empty_mask_policy: str = "full_image"

    def __post_init__(self):
        if not 0 <= self.margin_fraction < 1:
            raise ValidationError("margin_fraction must lie in [0, 1)")
        if self.min_crop_size < 8:
            raise ValidationError("min_crop_size must be >= 8")
        if self.empty_mask_policy != "full_image":
            raise ValidationError("only empty_mask_policy='full_image' is supported")

    def to_json(self) -> dict:
        return asdict(self)


def mask_to_bbox(mask: np.ndarray) -> BBox | None:
    """Tight inclusive ``(row_min, col_min, row_max, col_max)``; None if empty."""
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def _grow_to(lo: int, hi: int, size: int, limit: int) -> tuple[int, int]:
    """Widen ``[lo, hi]`` symmetrically to ``size`` pixels inside ``[0, limit)``."""
    size = min(size, limit)
    deficit = size - (hi - lo + 1)
    if deficit <= 0:
        return lo, hi
    lo -= deficit // 2
    hi += deficit - deficit // 2
    if lo < 0:
        hi -= lo
        lo = 0
    if hi > limit - 1:
        lo -= hi - (limit - 1)
        hi = limit - 1
    return lo, hi


def expand_bbox(bbox: BBox, margin_fraction: float, image_size: tuple[int, int], min_crop_size: int) -> BBox:
    """Grow each side by ``margin_fraction`` of the box extent, clamp, enforce a minimum size.

    The per-side margin is rounded half up to whole pixels.
    """
    r0, c0, r1, c1 = bbox
    h, w = image_size
    dr = int(math.floor(margin_fraction * (r1 - r0 + 1) + 0.5))
    dc = int(math.floor(margin_fraction * (c1 - c0 + 1) + 0.5))
    r0, r1 = max(0, r0 - dr), min(h - 1, r1 + dr)
    c0, c1 = max(0, c0 - dc), min(w - 1, c1 + dc)
    r0, r1 = _grow_to(r0, r1, min_crop_size, h)
    c0, c1 = _grow_to(c0, c1, min_crop_size, w)
    return r0, c0, r1, c1


def crop_box_for_mask(mask: np.ndarray, policy: CropPolicy) -> BBox | None:
    bbox = mask_to_bbox(mask)
    if bbox is None:
        return None
    return expand_bbox(bbox, policy.margin_fraction, mask.shape, policy.min_crop_size)


def crop_corpus(
    manifest: DatasetManifest,
    masks_dir: str | os.PathLike,
    policy: CropPolicy,
    out_root: str | os.PathLike,
    *,
    mask_suffix: str = DEFAULT_MASK_SUFFIX,
) -> DatasetManifest:
    """Replace every image by the crop around its predicted lesion mask.

    Writes ``out_root/images/``, ``labels.csv``, ``manifest.csv`` and
    ``crops.json`` (sample_id -> applied box, or null for pass-through).
    Sample ids, labels and split assignments are inherited unchanged.
    Ground-truth mask references are dropped because they no longer align.
    """
    masks_dir = Path(masks_dir)
    out_root = Path(out_root)
    image_dir = out_root / "images"
    missing = [r.sample_id for r in manifest.records if not (masks_dir / f"{r.sample_id}{mask_suffix}").is_file()]
    if missing:
        raise MissingPredictedMask(f"{len(missing)} record(s) have no predicted mask, e.g. {missing[:3]}")
    provenance: dict[str, list[int] | None] = {}
    records = []
    try:
        image_dir.mkdir(parents=True, exist_ok=True)
        for r in manifest.records:
            src = manifest.image_file(r)
            mask = read_mask(masks_dir / f"{r.sample_id}{mask_suffix}")
            box = crop_box_for_mask(mask, policy)
            if box is None:
                dest = image_dir / src.name
                shutil.copyfile(src, dest)
                provenance[r.sample_id] = None
            else:
                image = read_image(src)
                if image.shape[:2] != mask.shape:
                    raise ValidationError(f"{r.sample_id}: predicted mask does not match image size")
                r0, c0, r1, c1 = box
                dest = image_dir / f"{r.sample_id}.png"
                write_image(dest, image[r0 : r1 + 1, c0 : c1 + 1])
                provenance[r.sample_id] = list(box)
            records.append(replace(r, image_path=dest.relative_to(out_root).as_posix(), mask_path=None))
        cropped = DatasetManifest(tuple(records), seed=manifest.seed, source_root=str(out_root))
        write_labels_csv(((Path(rec.image_path).name, rec.label) for rec in cropped.records), out_root / "labels.csv")
        write_manifest(cropped, out_root / "manifest.csv")
        with open(out_root / "crops.json", "w", encoding="utf-8") as fh:
            json.dump({"policy": policy.to_json(), "crops": provenance}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write cropped corpus to {out_root}: {exc}") from exc
    return cropped
