# coding: utf-8

# # Class weights on an imbalanced corpus
#
# Train the same classifier twice on a 10:1 corpus, with and without
# inverse-frequency class weights, and look at minority-class recall.

import tempfile
from pathlib import Path

import numpy as np

from lesionlab import ClsConfig, SynthSpec, build_classifier, compute_class_weights, generate_synthetic_corpus, train_classifier
from lesionlab.classifier import predict_probs
from lesionlab.imaging import read_image
from lesionlab.manifest import stratified_split

root = Path(tempfile.mkdtemp())
counts = {"NV": 100, "BKL": 100, "VASC": 100, "DF": 10}
train = stratified_split(generate_synthetic_corpus(SynthSpec(class_counts=counts, seed=21, difficulty="noisy"), root / "train"), 0.2, seed=0)
test = generate_synthetic_corpus(SynthSpec(class_counts={k: 30 for k in counts}, seed=22, difficulty="noisy"), root / "test")

# w_c = N / (K n_c): the rare class gets the big weight

train_counts = {}
for r in train.split_records("train"):
    train_counts[r.label] = train_counts.get(r.label, 0) + 1
print(compute_class_weights(train_counts).weights)

images = [read_image(test.image_file(r)) for r in test.records]
labels = np.array([r.label for r in test.records])

for weighting in ("uniform", "balanced"):
    cfg = ClsConfig(class_weights=weighting, seed=0)
    model = build_classifier(cfg)
    train_classifier(model, train, cfg)
    pred = predict_probs(model, images).argmax(1)
    print(f"{weighting:9s} DF recall {np.mean(pred[labels == 5] == 5):.2f}")
