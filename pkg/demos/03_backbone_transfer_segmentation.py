# coding: utf-8

# # Reusing a classifier backbone for segmentation
#
# The segmenter starts from the trunk of a trained classifier. After transfer the
# two backbones compute the same features.

import tempfile
from pathlib import Path

import torch

from lesionlab import ClsConfig, SegConfig, SynthSpec, build_classifier, generate_synthetic_corpus, train_classifier
from lesionlab.checkpoint import save_checkpoint
from lesionlab.manifest import stratified_split
from lesionlab.metrics import mean_jaccard
from lesionlab.segmentation import build_seg_model, predict_masks, train_segmentation
from lesionlab.imaging import read_mask

root = Path(tempfile.mkdtemp())
corpus = generate_synthetic_corpus(SynthSpec(class_counts={c: 12 for c in ("MEL", "NV", "BCC", "BKL")}, seed=2), root / "corpus")
corpus = stratified_split(corpus, 0.25, seed=0)

cls_cfg = ClsConfig(epochs=4)
classifier = build_classifier(cls_cfg)
save_checkpoint(train_classifier(classifier, corpus, cls_cfg), root / "classifier.ckpt")

seg_cfg = SegConfig(backbone_init="classifier_transfer", classifier_checkpoint=str(root / "classifier.ckpt"), epochs=4)
seg = build_seg_model(seg_cfg)
report = seg.transfer_report
print(f"copied {len(report.copied)} tensors, {report.copied_fraction:.0%} of backbone parameters; skipped {report.skipped}")

x = torch.randn(2, 3, 64, 64)
classifier.eval(), seg.eval()
with torch.no_grad():
    print("max feature difference:", (seg.backbone(x) - classifier.backbone(x)).abs().max().item())

# Fine-tune on the masks, then score predicted masks on the val split.

checkpoint = train_segmentation(seg, corpus, seg_cfg)
val = corpus.with_records(corpus.split_records("val"))
pairs = [(mask, read_mask(val.mask_file(r))) for r, _, mask in predict_masks(seg, val)]
print("val mean Jaccard: %.3f" % mean_jaccard(pairs)[0])
