"""Procedural synthetic lesion corpora with exact ground-truth masks.

Each class owns a hue band, a border-irregularity range and an internal
texture frequency, so a small classifier can tell them apart. The skin
background is noisy; ``noisy`` difficulty widens the hue bands, raises the
noise and adds hair-like strokes over the skin.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb
from scipy import ndimage

from .errors import IoFailure, ValidationError
from .imaging import write_image, write_mask
from .labels import NUM_CLASSES, label_code, label_id
from .manifest import DEFAULT_MASK_SUFFIX, DatasetManifest, ingest_manifest, write_labels_csv

DIFFICULTIES = ("separable", "noisy")

_SKIN_HSV = (0.06, 0.32, 0.88)
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class SynthSpec:
    image_size: tuple[int, int] = (64, 64)
    class_counts: dict[int, int] = field(default_factory=dict)
    seed: int = 0
    difficulty: str = "separable"

    def __post_init__(self):
        h, w = self.image_size
        if h < 64 or w < 64:
            raise ValidationError(f"image_size must be at least 64x64, got {self.image_size}")
        counts = {label_id(k): int(v) for k, v in self.class_counts.items()}
        if any(v < 0 for v in counts.values()):
            raise ValidationError("class counts must be non-negative")
        if sum(1 for v in counts.values() if v > 0) < 2:
            raise ValidationError("at least two classes need a positive count")
        if self.difficulty not in DIFFICULTIES:
            raise ValidationError(f"difficulty must be one of {DIFFICULTIES}")
        object.__setattr__(self, "image_size", (int(h), int(w)))
        object.__setattr__(self, "class_counts", dict(sorted(counts.items())))

    def to_json(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "class_counts": {label_code(k): v for k, v in self.class_counts.items()},
            "seed": self.seed,
            "difficulty": self.difficulty,
        }


def class_hue(label: int) -> float:
    return label_id(label) / NUM_CLASSES


def class_irregularity(label: int) -> tuple[float, float]:
    lo = 0.02 + 0.03 * label_id(label)
    return lo, lo + 0.03


def class_texture_frequency(label: int) -> float:
    return 1.0 + label_id(label)


def render_lesion(
    label: int | str,
    seed,
    image_size: tuple[int, int] = (64, 64),
    difficulty: str = "separable",
) -> tuple[np.ndarray, np.ndarray]:
    """Render one lesion on skin.

    Returns ``(image, mask)``: a ``(H, W, 3)`` uint8 image and a boolean mask
    holding exactly the pixels painted with lesion colours, which form a
    single 4-connected component.
    """
    label = label_id(label)
    if difficulty not in DIFFICULTIES:
        raise ValidationError(f"difficulty must be one of {DIFFICULTIES}")
    noisy = difficulty == "noisy"
    rng = np.random.default_rng(seed)
    h, w = image_size
    side = min(h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    # shape: star-shaped blob with class-dependent border irregularity
    amp = rng.uniform(*class_irregularity(label))
    harmonics = np.arange(2, 6)
    parts = rng.dirichlet(np.ones(harmonics.size)) * amp
    phases = rng.uniform(0, 2 * np.pi, harmonics.size)
    r0 = rng.uniform(0.14, 0.28) * side
    r_max = r0 * (1 + amp)
    cy = rng.uniform(r_max + 2, h - r_max - 3)
    cx = rng.uniform(r_max + 2, w - r_max - 3)
    dy, dx = yy - cy, xx - cx
    rho = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    radius = r0 * (1 + np.sum(parts[:, None, None] * np.cos(harmonics[:, None, None] * theta + phases[:, None, None]), axis=0))
    mask = rho <= radius
    components, n = ndimage.label(mask, structure=_FOUR_CONNECTED)
    if n > 1:
        sizes = ndimage.sum(mask, components, index=np.arange(1, n + 1))
        mask = components == (1 + int(np.argmax(sizes)))

    # skin background
    noise_scale = 0.05 if noisy else 0.02
    skin = np.empty((h, w, 3))
    skin[..., 0] = _SKIN_HSV[0] + rng.uniform(-0.015, 0.015)
    skin[..., 1] = _SKIN_HSV[1] + rng.uniform(-0.05, 0.05)
    gy, gx = rng.uniform(-1, 1, 2) * 0.06 / side
    skin[..., 2] = _SKIN_HSV[2] + gy * dy + gx * dx
    skin[..., 1:] += rng.normal(0, noise_scale, (h, w, 2))

    # lesion palette: class hue band, texture rings at the class frequency
    hue_jitter = 0.06 if noisy else 0.015
    lesion = np.empty((h, w, 3))
    lesion[..., 0] = (class_hue(label) + rng.uniform(-hue_jitter, hue_jitter)) % 1.0
    lesion[..., 1] = rng.uniform(0.6, 0.85)
    texture = np.sin(2 * np.pi * class_texture_frequency(label) * rho / r0 + rng.uniform(0, 2 * np.pi))
    lesion[..., 2] = rng.uniform(0.38, 0.55) * (1 + 0.15 * texture)
    lesion[..., 1:] += rng.normal(0, noise_scale, (h, w, 2))

    hsv = np.where(mask[..., None], lesion, skin)
    hsv[..., 1:] = np.clip(hsv[..., 1:], 0, 1)
    rgb = hsv_to_rgb(hsv)

    if noisy:
        hair = _hair_strokes(rng, h, w, int(rng.integers(2, 6)))
        hair &= ~mask
        rgb[hair] = np.array([0.18, 0.12, 0.08]) + rng.normal(0, 0.02, (int(hair.sum()), 3))

    image = np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)
    return image, mask


def _hair_strokes(rng: np.random.Generator, h: int, w: int, count: int) -> np.ndarray:
    out = np.zeros((h, w), dtype=bool)
    t = np.linspace(0, 1, 4 * max(h, w))
    for _ in range(count):
        p0, p1, p2 = rng.uniform(0, 1, (3, 2)) * [h - 1, w - 1]
        curve = ((1 - t) ** 2)[:, None] * p0 + (2 * (1 - t) * t)[:, None] * p1 + (t**2)[:, None] * p2
        rows, cols = np.rint(curve).astype(int).T
        out[rows, cols] = True
    return out


def generate_synthetic_corpus(spec: SynthSpec, out_root: str | os.PathLike) -> DatasetManifest:
    """Render ``spec`` to ``out_root/{images,masks,labels.csv}`` and ingest it.

    Sample ``i`` is rendered from seed ``(spec.seed, i)`` so the corpus is
    reproducible byte for byte.
    """
    out_root = Path(out_root)
    image_dir = out_root / "images"
    mask_dir = out_root / "masks"
    try:
        image_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        rows = []
        index = 0
        for label, count in spec.class_counts.items():
            for _ in range(count):
                sid = f"synth_{index:05d}"
                image, mask = render_lesion(label, (spec.seed, index), spec.image_size, spec.difficulty)
                write_image(image_dir / f"{sid}.png", image)
                write_mask(mask_dir / f"{sid}{DEFAULT_MASK_SUFFIX}", mask)
                rows.append((sid, label))
                index += 1
        write_labels_csv(rows, out_root / "labels.csv")
    except OSError as exc:
        raise IoFailure(f"cannot write synthetic corpus to {out_root}: {exc}") from exc
    return ingest_manifest(image_dir, out_root / "labels.csv", mask_dir, seed=spec.seed)
