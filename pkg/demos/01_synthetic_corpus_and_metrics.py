# coding: utf-8

# # Synthetic lesions and the evaluation metrics
#
# A small labelled corpus is generated with exact ground-truth masks, then the
# metrics are exercised on it.

import tempfile
from pathlib import Path

import numpy as np

from lesionlab import SynthSpec, generate_synthetic_corpus
from lesionlab.imaging import read_mask
from lesionlab.metrics import confusion_matrix, jaccard, mean_jaccard, normalized_multiclass_accuracy

out = Path(tempfile.mkdtemp()) / "corpus"
spec = SynthSpec(class_counts={"MEL": 5, "NV": 20, "DF": 3}, seed=4, difficulty="noisy")
manifest = generate_synthetic_corpus(spec, out)
print(manifest.class_counts)

# Every record points at an image and a mask on disk.

r = manifest.records[0]
mask = read_mask(manifest.mask_file(r))
print(r.sample_id, mask.shape, mask.mean().round(3))

# Jaccard of a mask with a shifted copy of itself

shifted = np.roll(mask, 3, axis=1)
print("jaccard:", round(jaccard(mask, shifted), 4))

# mean_jaccard also reports the variant where scores under 0.65 count as zero.

masks = [read_mask(manifest.mask_file(r)) for r in manifest.records]
mean, thresholded, scores = mean_jaccard([(np.roll(m, 6, axis=0), m) for m in masks])
print(f"mean {mean:.3f}  thresholded@0.65 {thresholded:.3f}")

# Balanced accuracy weights every class equally, so a constant "NV" predictor
# scores 1/3 here despite high raw accuracy.

labels = np.array([r.label for r in manifest.records])
cm = confusion_matrix(labels, np.full_like(labels, 1))
print(cm[[0, 1, 5]][:, [0, 1, 5]])
print("raw accuracy", round((labels == 1).mean(), 3), "normalized", round(normalized_multiclass_accuracy(cm), 3))
