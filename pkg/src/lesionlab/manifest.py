"""Dataset manifests: ingestion, persistence, splits and class weights."""

from __future__ import annotations

import csv
import math
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    AmbiguousLabel,
    ClassTooSmall,
    CountOutOfRange,
    DuplicateSample,
    EmptyClass,
    MaskShapeMismatch,
    MissingImage,
    ValidationError,
)
from .imaging import image_size
from .labels import CLASS_CODES, NUM_CLASSES, label_code, label_id

SPLITS = ("train", "val", "unassigned")
MANIFEST_COLUMNS = ("sample_id", "image_path", "mask_path", "label_code", "split")
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")
DEFAULT_MASK_SUFFIX = "_segmentation.png"


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    image_path: str
    label: int
    mask_path: str | None = None
    split: str = "unassigned"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"invalid split {self.split!r} for {self.sample_id}")
        object.__setattr__(self, "label", label_id(self.label))


@dataclass(frozen=True)
class DatasetManifest:
    """Sorted, validated index of samples.

    ``image_path`` and ``mask_path`` of each record are relative to
    ``source_root``. ``class_counts`` only lists classes that occur.
    """

    records: tuple[SampleRecord, ...]
    seed: int = 0
    source_root: str = "."
    class_counts: dict[int, int] = field(init=False, compare=True)

    def __post_init__(self):
        records = tuple(sorted(self.records, key=lambda r: r.sample_id))
        seen = set()
        for r in records:
            if r.sample_id in seen:
                raise DuplicateSample(r.sample_id)
            seen.add(r.sample_id)
        object.__setattr__(self, "records", records)
        counts = Counter(r.label for r in records)
        object.__setattr__(self, "class_counts", {k: counts[k] for k in sorted(counts)})

    def __len__(self) -> int:
        return len(self.records)

    def image_file(self, record: SampleRecord) -> Path:
        return Path(self.source_root) / record.image_path

    def mask_file(self, record: SampleRecord) -> Path | None:
        if record.mask_path is None:
            return None
        return Path(self.source_root) / record.mask_path

    def split_records(self, split: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == split]

    def with_records(self, records: Iterable[SampleRecord], **changes) -> "DatasetManifest":
        return replace(self, records=tuple(records), **changes)

    @property
    def sample_ids(self) -> list[str]:
        return [r.sample_id for r in self.records]


# ---------------------------------------------------------------- ingestion


def _resolve_image(root: Path, name: str) -> Path:
    candidates = [root / name] + [root / (name + ext) for ext in IMAGE_EXTENSIONS]
    for c in candidates:
        if c.is_file():
            return c
    raise MissingImage(f"no image file for {name!r} under {root}")


def _sample_id(name: str) -> str:
    stem, ext = os.path.splitext(name)
    return stem if ext.lower() in IMAGE_EXTENSIONS else name


def _parse_label_row(row: dict, header: list[str], one_hot: bool, line: int) -> int:
    if not one_hot:
        value = row.get("label_code") or row.get("label") or ""
        try:
            return label_id(value.strip())
        except ValueError:
            raise AmbiguousLabel(f"line {line}: unknown label {value!r}") from None
    hot = []
    for code in CLASS_CODES:
        if code not in row:
            continue
        try:
            value = float(row[code])
        except (TypeError, ValueError):
            raise AmbiguousLabel(f"line {line}: non-numeric entry for {code}") from None
        if value == 1.0:
            hot.append(code)
        elif value != 0.0:
            raise AmbiguousLabel(f"line {line}: entry {value} for {code} is not 0 or 1")
    if len(hot) != 1:
        raise AmbiguousLabel(f"line {line}: expected exactly one positive class, got {hot}")
    return label_id(hot[0])


def ingest_manifest(
    root: str | os.PathLike,
    labels_file: str | os.PathLike,
    masks_dir: str | os.PathLike | None = None,
    *,
    mask_suffix: str = DEFAULT_MASK_SUFFIX,
    seed: int = 0,
) -> DatasetManifest:
    """Read a labels CSV and resolve every row against ``root``.

    The CSV is either one-hot (``image`` plus one column per class code) or
    two-column (``image,label_code``); the form is detected from the header.
    Masks are looked up as ``<sample_id><mask_suffix>`` inside ``masks_dir``;
    records without a mask file get ``mask_path=None``.
    """
    root = Path(root)
    with open(labels_file, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        reader.fieldnames = header
        if "image" not in header:
            raise ValidationError(f"{labels_file}: header must contain an 'image' column")
        one_hot = any(code in header for code in CLASS_CODES)
        if not one_hot and not ({"label", "label_code"} & set(header)):
            raise ValidationError(f"{labels_file}: no class columns and no label column")
        rows = list(reader)

    records = []
    seen = set()
    for line, row in enumerate(rows, start=2):
        name = row["image"].strip()
        sid = _sample_id(name)
        if sid in seen:
            raise DuplicateSample(f"line {line}: {sid}")
        seen.add(sid)
        label = _parse_label_row(row, header, one_hot, line)
        image_file = _resolve_image(root, name)
        mask_rel = None
        if masks_dir is not None:
            mask_file = Path(masks_dir) / f"{sid}{mask_suffix}"
            if mask_file.is_file():
                if image_size(mask_file) != image_size(image_file):
                    raise MaskShapeMismatch(f"{sid}: mask and image dimensions differ")
                mask_rel = Path(os.path.relpath(mask_file, root)).as_posix()
        records.append(
            SampleRecord(
                sample_id=sid,
                image_path=image_file.relative_to(root).as_posix(),
                label=label,
                mask_path=mask_rel,
            )
        )
    return DatasetManifest(tuple(records), seed=seed, source_root=str(root))


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            writer.writerow([r.sample_id, r.image_path, r.mask_path or "", label_code(r.label), r.split])


def read_manifest(
    path: str | os.PathLike, *, source_root: str | os.PathLike | None = None, seed: int = 0
) -> DatasetManifest:
    """Load a manifest CSV written by :func:`write_manifest`.

    Relative paths resolve against ``source_root``, which defaults to the
    directory containing the CSV.
    """
    path = Path(path)
    root = Path(source_root) if source_root is not None else path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise ValidationError(f"{path}: expected columns {','.join(MANIFEST_COLUMNS)}")
        records = [
            SampleRecord(
                sample_id=row["sample_id"],
                image_path=row["image_path"],
                label=label_id(row["label_code"]),
                mask_path=row["mask_path"] or None,
                split=row["split"],
            )
            for row in reader
        ]
    return DatasetManifest(tuple(records), seed=seed, source_root=str(root))


def write_labels_csv(records: Iterable[tuple[str, int]], path: str | os.PathLike) -> None:
    """Write a one-hot labels CSV from ``(image_name, label)`` pairs."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("image",) + CLASS_CODES)
        for name, label in records:
            lid = label_id(label)
            writer.writerow([name] + ["1.0" if i == lid else "0.0" for i in range(NUM_CLASSES)])


def validate_manifest(manifest: DatasetManifest) -> None:
    """Check that every referenced file exists and masks match image sizes."""
    for r in manifest.records:
        image_file = manifest.image_file(r)
        if not image_file.is_file():
            raise MissingImage(str(image_file))
        mask_file = manifest.mask_file(r)
        if mask_file is not None and image_size(mask_file) != image_size(image_file):
            raise MaskShapeMismatch(r.sample_id)


# ------------------------------------------------------------------- splits


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _assign(manifest: DatasetManifest, val_ids: set[str], seed: int) -> DatasetManifest:
    records = [replace(r, split="val" if r.sample_id in val_ids else "train") for r in manifest.records]
    return manifest.with_records(records, seed=seed)


def stratified_split(manifest: DatasetManifest, val_fraction: float, seed: int) -> DatasetManifest:
    """Per-class train/val split.

    Each class contributes ``round_half_up(n * val_fraction)`` validation
    samples, at least one and at most ``n - 1``.
    """
    if not 0 < val_fraction < 1:
        raise ValidationError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    by_class: dict[int, list[SampleRecord]] = {}
    for r in manifest.records:
        by_class.setdefault(r.label, []).append(r)
    val_ids: set[str] = set()
    for cls in sorted(by_class):
        members = by_class[cls]
        n = len(members)
        if n < 2:
            raise ClassTooSmall(f"class {label_code(cls)} has {n} sample(s); need at least 2")
        n_val = min(max(1, _round_half_up(n * val_fraction)), n - 1)
        rng = np.random.default_rng([seed, cls])
        order = rng.permutation(n)
        val_ids.update(members[i].sample_id for i in order[:n_val])
    return _assign(manifest, val_ids, seed)


def random_split(manifest: DatasetManifest, val_fraction: float, seed: int) -> DatasetManifest:
    """Unstratified train/val split over all records."""
    if not 0 < val_fraction < 1:
        raise ValidationError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    n = len(manifest)
    n_val = min(max(1, _round_half_up(n * val_fraction)), n - 1)
    return fixed_count_val_split(manifest, n_val, seed)


def fixed_count_val_split(manifest: DatasetManifest, val_count: int, seed: int) -> DatasetManifest:
    """Assign exactly ``val_count`` uniformly chosen records to validation."""
    n = len(manifest)
    if not 0 < val_count < n:
        raise CountOutOfRange(f"val_count must lie in (0, {n}), got {val_count}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=val_count, replace=False)
    return _assign(manifest, {manifest.records[i].sample_id for i in chosen}, seed)


# ------------------------------------------------------------ class weights


@dataclass(frozen=True)
class ClassWeights:
    weights: dict[int, float]

    def as_vector(self, num_classes: int = NUM_CLASSES, fill: float = 1.0) -> np.ndarray:
        """Dense weight vector; classes without a weight get ``fill``."""
        vec = np.full(num_classes, fill, dtype=np.float64)
        for k, w in self.weights.items():
            vec[k] = w
        return vec

    @classmethod
    def uniform(cls, num_classes: int = NUM_CLASSES) -> "ClassWeights":
        return cls({k: 1.0 for k in range(num_classes)})

    def to_json(self) -> dict[str, float]:
        return {label_code(k): w for k, w in sorted(self.weights.items())}

    @classmethod
    def from_json(cls, data: Mapping[str, float]) -> "ClassWeights":
        return cls({label_id(k): float(v) for k, v in data.items()})


def compute_class_weights(class_counts: Mapping[int | str, int]) -> ClassWeights:
    """Inverse-frequency weights ``N / (K * n_c)`` over the K listed classes.

    Normalised so that the sample-weighted mean weight is 1.
    """
    counts = {}
    for k, n in class_counts.items():
        counts[label_id(k) if isinstance(k, str) else int(k)] = int(n)
    if not counts:
        raise EmptyClass("no classes given")
    empty = [k for k, n in counts.items() if n <= 0]
    if empty:
        raise EmptyClass(f"classes with zero samples: {empty}")
    total = sum(counts.values())
    k = len(counts)
    return ClassWeights({c: total / (k * n) for c, n in sorted(counts.items())})
