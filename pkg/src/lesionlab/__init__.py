"""Skin-lesion segmentation and diagnosis pipeline."""

from .classifier import ClsConfig, build_classifier, load_classifier, predict, train_classifier
from .crop import CropPolicy, crop_corpus
from .labels import CLASS_LABELS, ClassLabel
from .manifest import (
    ClassWeights,
    DatasetManifest,
    SampleRecord,
    compute_class_weights,
    fixed_count_val_split,
    ingest_manifest,
    read_manifest,
    stratified_split,
    write_manifest,
)
from .metrics import (
    MetricsReport,
    confusion_matrix,
    jaccard,
    mean_jaccard,
    normalized_multiclass_accuracy,
    render_report,
)
from .pipeline import ExperimentConfig, compare_runs, load_config, run_all, run_stage
from .segmentation import SegConfig, build_seg_model, load_segmenter, predict_masks, train_segmentation
from .synth import SynthSpec, generate_synthetic_corpus, render_lesion

__version__ = "0.1.0"
