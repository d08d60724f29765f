import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from lesionlab.checkpoint import Checkpoint, load_checkpoint, save_checkpoint, state_to_numpy
from lesionlab.classifier import ClsConfig, build_classifier
from lesionlab.crop import mask_to_bbox
from lesionlab.errors import (
    CheckpointShapeMismatch,
    CheckpointUnreadable,
    ImageTooSmall,
    MissingMasks,
    UnknownBackbone,
    ValidationError,
)
from lesionlab.imaging import read_image, read_mask
from lesionlab.manifest import stratified_split
from lesionlab.metrics import jaccard
from lesionlab.segmentation import (
    Detection,
    SegConfig,
    build_seg_model,
    infer_detections,
    load_segmenter,
    select_primary_mask,
    train_segmentation,
    transfer_backbone_weights,
)
from lesionlab.synth import SynthSpec, generate_synthetic_corpus, render_lesion


def _classifier_ckpt(path, backbone_id="tiny8", seed=11):
    model = build_classifier(ClsConfig(backbone_id=backbone_id, seed=seed))
    # perturb batch-norm statistics so buffers are distinguishable from a fresh init
    for name, buf in model.named_buffers():
        if buf.dtype.is_floating_point:
            buf.uniform_(0.5, 1.5)
    ckpt = Checkpoint("classifier", backbone_id, state_to_numpy(model.state_dict()), ClsConfig(backbone_id=backbone_id).to_json())
    save_checkpoint(ckpt, path)
    return model


def test_config_invariants():
    with pytest.raises(ValidationError):
        SegConfig(backbone_init="classifier_transfer")
    with pytest.raises(ValidationError):
        SegConfig(confidence_threshold=1.0)
    with pytest.raises(ValidationError):
        SegConfig(roi_candidates_per_image=0)
    cfg = SegConfig(input_size=[96, 64], backbone_init="classifier_transfer", classifier_checkpoint="x.ckpt")
    assert SegConfig.from_json(cfg.to_json()) == cfg
    defaults = SegConfig()
    assert (defaults.roi_candidates_per_image, defaults.confidence_threshold) == (200, 0.9)


def test_random_build_is_deterministic():
    a = build_seg_model(SegConfig(seed=4)).state_dict()
    b = build_seg_model(SegConfig(seed=4)).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    with pytest.raises(UnknownBackbone):
        build_seg_model(SegConfig(backbone_id="nonexistent"))


def test_transfer_copies_every_backbone_tensor(tmp_path):
    classifier = _classifier_ckpt(tmp_path / "c.ckpt")
    cfg = SegConfig(backbone_init="classifier_transfer", classifier_checkpoint=str(tmp_path / "c.ckpt"), seed=99)
    seg = build_seg_model(cfg)
    report = seg.transfer_report
    assert report.copied_fraction == 1.0
    assert report.missing == []
    assert "fc.weight" in report.skipped and "fc.bias" in report.skipped
    src = classifier.backbone.state_dict()
    for name, tensor in seg.backbone.state_dict().items():
        assert torch.equal(tensor, src[name]), name


def test_transfer_forward_pass_matches_classifier_backbone(tmp_path):
    classifier = _classifier_ckpt(tmp_path / "c.ckpt").eval()
    seg = build_seg_model(SegConfig(backbone_init="classifier_transfer", classifier_checkpoint=str(tmp_path / "c.ckpt"))).eval()
    x = torch.randn(4, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        assert torch.allclose(seg.backbone(x), classifier.backbone(x), atol=1e-5)
        fresh = build_seg_model(SegConfig(seed=1)).eval()
        assert not torch.allclose(fresh.backbone(x), classifier.backbone(x), atol=1e-3)


def test_transfer_rejects_other_backbone(tmp_path):
    _classifier_ckpt(tmp_path / "c.ckpt", backbone_id="tiny4")
    with pytest.raises(CheckpointShapeMismatch):
        transfer_backbone_weights(tmp_path / "c.ckpt", build_seg_model(SegConfig()))
    with pytest.raises(CheckpointShapeMismatch):
        build_seg_model(SegConfig(backbone_init="classifier_transfer", classifier_checkpoint=str(tmp_path / "c.ckpt")))


def test_transfer_rejects_partial_match(tmp_path):
    _classifier_ckpt(tmp_path / "c.ckpt")
    ckpt = load_checkpoint(tmp_path / "c.ckpt")
    for k in list(ckpt.weights):
        if k.startswith(("backbone.layer7", "backbone.layer8")):
            ckpt.weights[k] = np.zeros((1,), np.float32)
    save_checkpoint(ckpt, tmp_path / "bad.ckpt")
    with pytest.raises(CheckpointShapeMismatch):
        transfer_backbone_weights(tmp_path / "bad.ckpt", build_seg_model(SegConfig()))


def test_transfer_unreadable(tmp_path):
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(CheckpointUnreadable):
        transfer_backbone_weights(tmp_path / "junk.ckpt", build_seg_model(SegConfig()))
    with pytest.raises(CheckpointUnreadable):
        transfer_backbone_weights(tmp_path / "missing.ckpt", build_seg_model(SegConfig()))


def test_generic_pretrained_from_checkpoint(tmp_path):
    classifier = _classifier_ckpt(tmp_path / "c.ckpt")
    seg = build_seg_model(SegConfig(backbone_init="generic_pretrained", pretrained_checkpoint=str(tmp_path / "c.ckpt")))
    src = classifier.backbone.state_dict()
    assert all(torch.equal(v, src[k]) for k, v in seg.backbone.state_dict().items())


def _box_ok(d: Detection, shape):
    r0, c0, r1, c1 = d.box
    h, w = shape
    assert 0 <= r0 <= r1 < h and 0 <= c0 <= c1 < w
    assert d.mask.shape == shape
    inside = np.zeros(shape, bool)
    inside[r0 : r1 + 1, c0 : c1 + 1] = True
    assert not (d.mask & ~inside).any()
    assert 0.0 <= d.score <= 1.0


@pytest.mark.parametrize("seed", range(6))
def test_untrained_detections_satisfy_invariants(seed):
    model = build_seg_model(SegConfig(seed=seed, roi_candidates_per_image=50))
    rng = np.random.default_rng(seed)
    for shape in [(64, 64), (80, 50), (16, 16)]:
        image = rng.integers(0, 256, (*shape, 3), dtype=np.uint8)
        dets = infer_detections(model, image)
        assert [d.score for d in dets] == sorted((d.score for d in dets), reverse=True)
        for d in dets:
            _box_ok(d, shape)
        mask = select_primary_mask(dets, shape, 0.9)
        assert mask.shape == shape


def test_image_too_small():
    with pytest.raises(ImageTooSmall):
        infer_detections(build_seg_model(SegConfig()), np.zeros((8, 64, 3), np.uint8))


def _det(score, value=None, shape=(8, 8)):
    mask = np.zeros(shape, bool)
    mask[0, 0] = True
    return Detection((0, 0, 0, 0), score, mask if value is None else value)


def test_select_primary_mask_cases():
    a = np.zeros((4, 4), bool)
    a[1, 1] = True
    b = np.zeros((4, 4), bool)
    b[2, 2] = True
    assert np.array_equal(select_primary_mask([Detection((1, 1, 1, 1), 0.95, a), Detection((2, 2, 2, 2), 0.92, b)], (4, 4), 0.9), a)
    assert np.array_equal(select_primary_mask([Detection((2, 2, 2, 2), 0.92, b), Detection((1, 1, 1, 1), 0.95, a)], (4, 4), 0.9), a)
    assert np.array_equal(select_primary_mask([Detection((2, 2, 2, 2), 0.6, b)], (4, 4), 0.9), b)
    assert select_primary_mask([], (4, 5), 0.9).all()
    assert select_primary_mask([], (4, 5), 0.9).shape == (4, 5)
    with pytest.raises(ValidationError):
        select_primary_mask([], (4, 4), 0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.floats(0.01, 0.98), st.floats(0.0, 0.98))
def test_threshold_monotonicity(scores, t_low, bump):
    t_high = min(t_low + bump, 0.99)
    dets = []
    for i, s in enumerate(scores):
        m = np.zeros((1, 8), bool)
        m[0, i] = True
        dets.append(Detection((0, i, 0, i), s, m))
    best = int(np.argmax(scores))
    for t in (t_low, t_high):
        assert np.array_equal(select_primary_mask(dets, (1, 8), t), dets[best].mask)


@pytest.fixture(scope="module")
def seg_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("seg")
    m = generate_synthetic_corpus(SynthSpec(class_counts={i: 10 for i in range(7)}, seed=8), root)
    return stratified_split(m, 0.2, seed=0)


def test_one_epoch_smoke(tmp_path_factory):
    root = tmp_path_factory.mktemp("seg8")
    m = stratified_split(generate_synthetic_corpus(SynthSpec(class_counts={0: 4, 3: 4}, seed=1), root), 0.25, 0)
    cfg = SegConfig(epochs=1)
    ckpt = train_segmentation(build_seg_model(cfg), m, cfg)
    assert len(ckpt.log) == 1
    assert math.isfinite(ckpt.log[0]["loss"])
    assert 0.0 <= ckpt.log[0]["val_mean_jaccard"] <= 1.0


def test_missing_masks(small_split):
    stripped = small_split.with_records([replace(r, mask_path=None) for r in small_split.records])
    with pytest.raises(MissingMasks):
        train_segmentation(build_seg_model(SegConfig(epochs=1)), stripped, SegConfig(epochs=1))


def test_epoch_zero_loss_is_deterministic(small_split):
    cfg = SegConfig(epochs=1, seed=3)
    a = train_segmentation(build_seg_model(cfg), small_split, cfg)
    b = train_segmentation(build_seg_model(cfg), small_split, cfg)
    assert a.log[0]["loss"] == b.log[0]["loss"]


@pytest.fixture(scope="module")
def trained_segmenter(seg_corpus, tmp_path_factory):
    cfg = SegConfig(epochs=5)
    ckpt = train_segmentation(build_seg_model(cfg), seg_corpus, cfg)
    path = tmp_path_factory.mktemp("segckpt") / "segmenter.ckpt"
    save_checkpoint(ckpt, path)
    return ckpt, load_segmenter(path)


def test_trained_segmenter_quality(seg_corpus, trained_segmenter):
    ckpt, model = trained_segmenter
    assert ckpt.extra["best_epoch"] == int(np.argmax([e["val_mean_jaccard"] for e in ckpt.log]))
    scores = []
    for r in seg_corpus.split_records("val"):
        image, truth = read_image(seg_corpus.image_file(r)), read_mask(seg_corpus.mask_file(r))
        dets = infer_detections(model, image)
        assert dets, r.sample_id
        tr0, tc0, tr1, tc1 = mask_to_bbox(truth)
        r0, c0, r1, c1 = dets[0].box
        assert r0 <= tr1 and tr0 <= r1 and c0 <= tc1 and tc0 <= c1
        scores.append(jaccard(select_primary_mask(dets, image.shape[:2], 0.9), truth))
    assert np.mean(scores) >= 0.70
    assert np.mean(scores) == pytest.approx(max(e["val_mean_jaccard"] for e in ckpt.log))


def test_background_only_image(trained_segmenter):
    _, model = trained_segmenter
    image, mask = render_lesion(1, 0)
    skin = np.broadcast_to(image[~mask].mean(axis=0).astype(np.uint8), image.shape).copy()
    for d in infer_detections(model, skin):
        _box_ok(d, (64, 64))
