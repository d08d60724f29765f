"""The seven lesion diagnosis classes, in their fixed order."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ClassLabel:
    id: int
    code: str
    display_name: str


CLASS_LABELS: tuple[ClassLabel, ...] = (
    ClassLabel(0, "MEL", "Melanoma"),
    ClassLabel(1, "NV", "Melanocytic nevus"),
    ClassLabel(2, "BCC", "Basal cell carcinoma"),
    ClassLabel(3, "AKIEC", "Actinic keratosis / Bowen's disease"),
    ClassLabel(4, "BKL", "Benign keratosis"),
    ClassLabel(5, "DF", "Dermatofibroma"),
    ClassLabel(6, "VASC", "Vascular lesion"),
)

NUM_CLASSES = len(CLASS_LABELS)
CLASS_CODES: tuple[str, ...] = tuple(c.code for c in CLASS_LABELS)
CODE_TO_ID: dict[str, int] = {c.code: c.id for c in CLASS_LABELS}


def label_id(label: int | str) -> int:
    """Normalise a class id or code to an integer id."""
    if isinstance(label, str):
        try:
            return CODE_TO_ID[label.upper()]
        except KeyError:
            raise ValueError(f"unknown class code {label!r}") from None
    label = int(label)
    if not 0 <= label < NUM_CLASSES:
        raise ValueError(f"class id {label} out of range [0, {NUM_CLASSES - 1}]")
    return label


def label_code(label: int | str) -> str:
    return CLASS_LABELS[label_id(label)].code
