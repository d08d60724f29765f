import csv
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lesionlab.errors import (
    AmbiguousLabel,
    ClassTooSmall,
    CountOutOfRange,
    DuplicateSample,
    EmptyClass,
    MissingImage,
)
from lesionlab.imaging import write_image, write_mask
from lesionlab.labels import CLASS_CODES, CLASS_LABELS, CODE_TO_ID
from lesionlab.manifest import (
    DatasetManifest,
    SampleRecord,
    compute_class_weights,
    fixed_count_val_split,
    ingest_manifest,
    random_split,
    read_manifest,
    stratified_split,
    write_labels_csv,
    write_manifest,
)

HAM_COUNTS = {"MEL": 1113, "NV": 6705, "BCC": 514, "AKIEC": 327, "BKL": 1099, "DF": 115, "VASC": 142}


def test_label_table():
    assert [c.code for c in CLASS_LABELS] == ["MEL", "NV", "BCC", "AKIEC", "BKL", "DF", "VASC"]
    assert [c.id for c in CLASS_LABELS] == list(range(7))
    assert len(set(CODE_TO_ID.values())) == 7


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _touch_images(root, names, size=(4, 4)):
    for n in names:
        write_image(root / f"{n}.jpg", np.zeros((*size, 3), np.uint8))


def test_ingest_one_hot(tmp_path):
    _touch_images(tmp_path, ["img1", "img2"])
    write_labels_csv([("img1", "NV"), ("img2", "DF")], tmp_path / "labels.csv")
    m = ingest_manifest(tmp_path, tmp_path / "labels.csv")
    assert len(m) == 2
    assert m.class_counts == {CODE_TO_ID["NV"]: 1, CODE_TO_ID["DF"]: 1}
    assert all(r.split == "unassigned" for r in m.records)
    assert m.records[0].image_path == "img1.jpg"


def test_ingest_two_column_form(tmp_path):
    _touch_images(tmp_path, ["a", "b"])
    _write_rows(tmp_path / "labels.csv", ["image", "label_code"], [["a", "MEL"], ["b", "VASC"]])
    m = ingest_manifest(tmp_path, tmp_path / "labels.csv")
    assert [r.label for r in m.records] == [0, 6]


def test_ingest_rejects_two_hot_rows(tmp_path):
    _touch_images(tmp_path, ["a"])
    _write_rows(tmp_path / "labels.csv", ["image", *CLASS_CODES], [["a", "1.0", "1.0", "0", "0", "0", "0", "0"]])
    with pytest.raises(AmbiguousLabel):
        ingest_manifest(tmp_path, tmp_path / "labels.csv")


def test_ingest_missing_and_duplicate(tmp_path):
    _touch_images(tmp_path, ["a"])
    write_labels_csv([("a", 0), ("ghost", 1)], tmp_path / "labels.csv")
    with pytest.raises(MissingImage):
        ingest_manifest(tmp_path, tmp_path / "labels.csv")
    write_labels_csv([("a", 0), ("a", 1)], tmp_path / "labels.csv")
    with pytest.raises(DuplicateSample):
        ingest_manifest(tmp_path, tmp_path / "labels.csv")


def test_ingest_attaches_masks(tmp_path):
    images, masks = tmp_path / "images", tmp_path / "masks"
    images.mkdir(), masks.mkdir()
    _touch_images(images, ["a", "b"], size=(8, 6))
    write_mask(masks / "a_segmentation.png", np.ones((8, 6), bool))
    write_labels_csv([("a", 0), ("b", 1)], tmp_path / "labels.csv")
    m = ingest_manifest(images, tmp_path / "labels.csv", masks)
    assert m.records[0].mask_path == "../masks/a_segmentation.png"
    assert m.records[1].mask_path is None
    assert m.mask_file(m.records[0]).is_file()


def test_ingest_ham_shaped_counts(tmp_path):
    rows = []
    for code, n in HAM_COUNTS.items():
        rows += [(f"ISIC_{code}_{i:05d}", code) for i in range(n)]
    for name, _ in rows:
        (tmp_path / f"{name}.jpg").touch()
    write_labels_csv(rows, tmp_path / "labels.csv")
    m = ingest_manifest(tmp_path, tmp_path / "labels.csv")
    assert m.class_counts[CODE_TO_ID["NV"]] == 6705
    assert m.class_counts[CODE_TO_ID["DF"]] == 115
    assert len(m) == sum(m.class_counts.values()) == 10015


def _synthetic_manifest(counts):
    records = []
    for label, n in counts.items():
        records += [SampleRecord(f"s{label}_{i:03d}", f"s{label}_{i:03d}.png", label) for i in range(n)]
    return DatasetManifest(tuple(records))


def test_manifest_round_trip(tmp_path, small_split):
    write_manifest(small_split, tmp_path / "manifest.csv")
    again = read_manifest(tmp_path / "manifest.csv", source_root=small_split.source_root, seed=small_split.seed)
    assert again == small_split
    raw = (tmp_path / "manifest.csv").read_bytes()
    assert raw.startswith(b"sample_id,image_path,mask_path,label_code,split\n")
    assert b"\r\n" not in raw


@pytest.mark.parametrize("n, expected_val", [(10, 2), (5, 1), (2, 1), (3, 1), (8, 2), (13, 3)])
def test_stratified_rounding(n, expected_val):
    # round half up of n * 0.2, at least 1 and at most n - 1
    m = stratified_split(_synthetic_manifest({0: n, 1: 4}), 0.2, seed=0)
    val = [r for r in m.records if r.label == 0 and r.split == "val"]
    assert len(val) == expected_val


def test_stratified_partition_and_determinism():
    base = _synthetic_manifest({0: 37, 1: 11, 2: 5, 5: 2})
    a = stratified_split(base, 0.2, seed=7)
    b = stratified_split(base, 0.2, seed=7)
    assert a == b
    assert {r.sample_id for r in a.records} == {r.sample_id for r in base.records}
    for label, n in base.class_counts.items():
        n_val = sum(1 for r in a.records if r.label == label and r.split == "val")
        assert abs(n_val - n * 0.2) <= 1
        assert 1 <= n_val < n
    assert stratified_split(base, 0.2, seed=8) != a


def test_stratified_split_rejects_singletons():
    with pytest.raises(ClassTooSmall):
        stratified_split(_synthetic_manifest({0: 10, 1: 1}), 0.2, seed=0)


def test_random_split_fraction():
    m = random_split(_synthetic_manifest({0: 60, 1: 40}), 0.2, seed=1)
    assert sum(r.split == "val" for r in m.records) == 20


def test_fixed_count_split():
    base = _synthetic_manifest({0: 2000, 1: 594})
    m = fixed_count_val_split(base, 20, seed=3)
    assert sum(r.split == "val" for r in m.records) == 20
    assert sum(r.split == "train" for r in m.records) == 2574
    assert fixed_count_val_split(base, 20, seed=3) == m
    with pytest.raises(CountOutOfRange):
        fixed_count_val_split(base, len(base), seed=3)
    with pytest.raises(CountOutOfRange):
        fixed_count_val_split(base, 0, seed=3)


def test_class_weights_ham_counts():
    w = compute_class_weights(HAM_COUNTS)
    total = sum(HAM_COUNTS.values())
    assert w.weights[CODE_TO_ID["NV"]] == pytest.approx(float(Fraction(total, 7 * 6705)), rel=1e-12)
    assert w.weights[CODE_TO_ID["DF"]] == pytest.approx(float(Fraction(total, 7 * 115)), rel=1e-12)
    assert w.weights[CODE_TO_ID["NV"]] == pytest.approx(0.2134, abs=1e-4)
    assert w.weights[CODE_TO_ID["DF"]] == pytest.approx(12.441, abs=1e-3)


def test_class_weights_small_cases():
    assert compute_class_weights({0: 9, 1: 9, 2: 9}).weights == {0: 1.0, 1: 1.0, 2: 1.0}
    w = compute_class_weights({0: 1, 1: 3})
    assert w.weights[0] == pytest.approx(2.0)
    assert w.weights[1] == pytest.approx(2 / 3)
    with pytest.raises(EmptyClass):
        compute_class_weights({0: 4, 1: 0})


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 10**6), min_size=1, max_size=12))
def test_class_weight_law(counts):
    w = compute_class_weights(dict(enumerate(counts))).weights
    n_total = sum(counts)
    assert sum(n * w[i] for i, n in enumerate(counts)) == pytest.approx(n_total, rel=1e-9)
    for i, a in enumerate(counts):
        for j, b in enumerate(counts):
            if a > b:
                assert w[i] < w[j]
