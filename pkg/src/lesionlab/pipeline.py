"""Config-driven experiment graph with content-hash stage caching.

A run lives in ``<output_root>/<run_id>/``. Each stage writes its artifacts
to ``<run>/<stage>/`` and a ``stage.json`` with its config hash, the
output hashes of the upstream stages it consumed and its own output hash.
Every execution (or cache hit) is appended to ``<run>/run.json``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import shutil
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml
from filelock import FileLock, Timeout

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, state_to_numpy
from .classifier import ClsConfig, build_classifier, load_classifier, predict_probs, train_classifier, write_predictions_csv
from .crop import CropPolicy, crop_corpus
from .errors import ConfigHashMismatch, LesionLabError, MissingUpstreamArtifact, SampleSetMismatch, ValidationError
from .imaging import read_image, read_mask, write_mask
from .labels import CLASS_CODES
from .manifest import (
    DEFAULT_MASK_SUFFIX,
    DatasetManifest,
    fixed_count_val_split,
    ingest_manifest,
    random_split,
    read_manifest,
    stratified_split,
    write_manifest,
)
from .metrics import MetricsReport, build_report, load_report, render_report, save_report
from .segmentation import SegConfig, build_seg_model, infer_detections, load_segmenter, select_primary_mask, train_segmentation
from .synth import SynthSpec, generate_synthetic_corpus

STAGES = (
    "ingest",
    "split",
    "train_cls",
    "transfer",
    "train_seg",
    "predict_masks",
    "crop",
    "train_cls_cropped",
    "evaluate",
    "report",
)

DEPENDENCIES: dict[str, tuple[str, ...]] = {
    "ingest": (),
    "split": ("ingest",),
    "train_cls": ("split",),
    "transfer": ("train_cls",),
    "train_seg": ("split", "transfer"),
    "predict_masks": ("split", "train_seg"),
    "crop": ("split", "predict_masks"),
    "train_cls_cropped": ("crop",),
    "evaluate": ("split", "train_cls", "predict_masks", "crop", "train_cls_cropped"),
    "report": ("evaluate",),
}

RUN_LEDGER = "run.json"
STAGE_RECORD = "stage.json"


@dataclass
class SplitParams:
    """``seg_val_count`` draws a separate fixed-size validation set for the segmenter."""

    val_fraction: float = 0.2
    stratified: bool = True
    seg_val_count: int | None = None

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValidationError(f"split.val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.seg_val_count is not None and self.seg_val_count < 1:
            raise ValidationError("split.seg_val_count must be >= 1")


@dataclass
class ExperimentConfig:
    corpus: dict = field(default_factory=dict)
    split: SplitParams = field(default_factory=SplitParams)
    seg: SegConfig = field(default_factory=SegConfig)
    cls: ClsConfig = field(default_factory=ClsConfig)
    cls_cropped: ClsConfig = field(default_factory=ClsConfig)
    crop: CropPolicy = field(default_factory=CropPolicy)
    finetune_cropped: bool = False
    output_root: str = "runs"
    run_id: str = "run"
    seed: int = 0

    @property
    def run_dir(self) -> Path:
        return Path(self.output_root) / self.run_id

    @property
    def synth_spec(self) -> SynthSpec | None:
        data = self.corpus.get("synth")
        return None if data is None else SynthSpec(**{**data, "image_size": tuple(data.get("image_size", (64, 64)))})

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        """Build from plain data; the global ``seed`` is pushed into every engine config."""
        data = copy.deepcopy(data)
        seed = int(data.get("seed", 0))
        run_dir = Path(data.get("output_root", "runs")) / data.get("run_id", "run")
        corpus = data.get("corpus") or {}
        if "synth" not in corpus and "labels_file" not in corpus:
            raise ValidationError("corpus needs either a 'synth' spec or 'root'/'labels_file'")
        seg = {**(data.get("seg") or {}), "seed": seed}
        if seg.get("backbone_init") == "classifier_transfer" and not seg.get("classifier_checkpoint"):
            seg["classifier_checkpoint"] = str((run_dir / "train_cls" / "classifier.ckpt").resolve())
        return cls(
            corpus=corpus,
            split=SplitParams(**(data.get("split") or {})),
            seg=SegConfig(**seg),
            cls=ClsConfig(**{**(data.get("cls") or {}), "seed": seed}),
            cls_cropped=ClsConfig(**{**(data.get("cls_cropped") or data.get("cls") or {}), "seed": seed}),
            crop=CropPolicy(**(data.get("crop") or {})),
            finetune_cropped=bool(data.get("finetune_cropped", False)),
            output_root=str(data.get("output_root", "runs")),
            run_id=str(data.get("run_id", "run")),
            seed=seed,
        )

    def to_dict(self) -> dict:
        return {
            "corpus": self.corpus,
            "split": asdict(self.split),
            "seg": self.seg.to_json(),
            "cls": self.cls.to_json(),
            "cls_cropped": self.cls_cropped.to_json(),
            "crop": self.crop.to_json(),
            "finetune_cropped": self.finetune_cropped,
            "output_root": self.output_root,
            "run_id": self.run_id,
            "seed": self.seed,
        }

    def stage_section(self, stage: str) -> dict:
        """The part of the config that determines ``stage``'s artifacts."""
        d = self.to_dict()
        for key in ("seg", "cls", "cls_cropped"):
            d[key].pop("device", None)
        sections = {
            "ingest": {"corpus": d["corpus"]},
            "split": {"split": d["split"], "seed": d["seed"]},
            "train_cls": {"cls": d["cls"]},
            "transfer": {"seg": d["seg"]},
            "train_seg": {"seg": d["seg"]},
            "predict_masks": {"seg": d["seg"]},
            "crop": {"crop": d["crop"]},
            "train_cls_cropped": {"cls_cropped": d["cls_cropped"], "finetune": d["finetune_cropped"]},
            "evaluate": {},
            "report": {},
        }
        return sections[stage]

    def config_hash(self, stage: str) -> str:
        return _hash_json(self.stage_section(stage))


def _parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ValidationError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def load_config(path: str | os.PathLike | None = None, overrides: list[str] = (), data: dict | None = None) -> ExperimentConfig:
    """Read a YAML/JSON config, apply dotted ``key=value`` overrides and ``LESIONLAB_SEED``."""
    if data is None:
        if path is None:
            raise ValidationError("no config given")
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    data = copy.deepcopy(data)
    for item in overrides:
        keys, value = _parse_override(item)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    if os.environ.get("LESIONLAB_SEED"):
        data["seed"] = int(os.environ["LESIONLAB_SEED"])
    try:
        return ExperimentConfig.from_dict(data)
    except TypeError as exc:
        raise ValidationError(f"invalid config: {exc}") from exc


# ------------------------------------------------------------------ hashing


def _hash_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def hash_directory(path: Path, exclude: tuple[str, ...] = (STAGE_RECORD,)) -> str:
    digest = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        rel = f.relative_to(path).as_posix()
        if rel in exclude:
            continue
        digest.update(rel.encode() + b"\0")
        digest.update(hashlib.sha256(f.read_bytes()).digest())
    return digest.hexdigest()


def _read_json(path: Path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ------------------------------------------------------------------- stages


@dataclass
class StageResult:
    stage: str
    status: str
    path: Path
    duration_s: float = 0.0


class _Run:
    """Artifact accessors for one run directory."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.dir = config.run_dir

    def stage_dir(self, stage: str) -> Path:
        return self.dir / stage

    def source_root(self) -> Path:
        info = _read_json(self.stage_dir("ingest") / "source.json")
        root = Path(info["source_root"])
        return root if root.is_absolute() else self.stage_dir("ingest") / root

    def manifest(self, name: str) -> DatasetManifest:
        stage, _, fname = name.partition("/")
        return read_manifest(self.stage_dir(stage) / fname, source_root=self.source_root(), seed=self.config.seed)

    def cropped_manifest(self) -> DatasetManifest:
        return read_manifest(self.stage_dir("crop") / "manifest.csv", seed=self.config.seed)


def _stage_ingest(run: _Run, out: Path) -> None:
    corpus = run.config.corpus
    spec = run.config.synth_spec
    if spec is not None:
        manifest = generate_synthetic_corpus(spec, out / "corpus")
        source = {"source_root": "corpus/images", "synthetic": spec.to_json()}
    else:
        root = Path(corpus["root"]).resolve()
        manifest = ingest_manifest(
            root,
            corpus["labels_file"],
            corpus.get("masks_dir"),
            mask_suffix=corpus.get("mask_suffix", DEFAULT_MASK_SUFFIX),
        )
        source = {"source_root": str(root), "labels_sha256": hashlib.sha256(Path(corpus["labels_file"]).read_bytes()).hexdigest()}
    write_manifest(manifest, out / "manifest.csv")
    _write_json(out / "source.json", source)


def _stage_split(run: _Run, out: Path) -> None:
    params = run.config.split
    seed = run.config.seed
    manifest = run.manifest("ingest/manifest.csv")
    split = stratified_split if params.stratified else random_split
    cls_manifest = split(manifest, params.val_fraction, seed)
    write_manifest(cls_manifest, out / "manifest.csv")
    with_masks = manifest.with_records([r for r in manifest.records if r.mask_path is not None])
    if params.seg_val_count is not None:
        seg_manifest = fixed_count_val_split(with_masks, params.seg_val_count, seed)
    else:
        splits = {r.sample_id: r.split for r in cls_manifest.records}
        seg_manifest = with_masks.with_records([replace(r, split=splits[r.sample_id]) for r in with_masks.records])
    write_manifest(seg_manifest, out / "seg_manifest.csv")
    summary = {
        name: {s: sum(1 for r in m.records if r.split == s) for s in ("train", "val")}
        for name, m in (("classification", cls_manifest), ("segmentation", seg_manifest))
    }
    _write_json(out / "split.json", summary)


def _train_cls(manifest: DatasetManifest, config: ClsConfig, out: Path) -> None:
    ckpt = train_classifier(build_classifier(config), manifest, config)
    save_checkpoint(ckpt, out / "classifier.ckpt")
    _write_json(out / "log.json", ckpt.log)


def _stage_train_cls(run: _Run, out: Path) -> None:
    _train_cls(run.manifest("split/manifest.csv"), run.config.cls, out)


def _stage_transfer(run: _Run, out: Path) -> None:
    config = run.config.seg
    model = build_seg_model(config)
    report = model.transfer_report.to_json() if model.transfer_report is not None else None
    ckpt = Checkpoint("segmenter", model.backbone_id, state_to_numpy(model.state_dict()), config.to_json(), [])
    save_checkpoint(ckpt, out / "seg_init.ckpt")
    _write_json(out / "transfer.json", {"backbone_init": config.backbone_init, "report": report})


def _stage_train_seg(run: _Run, out: Path) -> None:
    config = run.config.seg
    model = load_segmenter(run.stage_dir("transfer") / "seg_init.ckpt")
    model.train()
    transfer = _read_json(run.stage_dir("transfer") / "transfer.json")["report"]
    ckpt = train_segmentation(model, run.manifest("split/seg_manifest.csv"), config)
    ckpt.extra["transfer"] = transfer
    save_checkpoint(ckpt, out / "segmenter.ckpt")
    _write_json(out / "log.json", ckpt.log)


def _stage_predict_masks(run: _Run, out: Path) -> None:
    model = load_segmenter(run.stage_dir("train_seg") / "segmenter.ckpt")
    manifest = run.manifest("split/manifest.csv")
    mask_dir = out / "masks"
    mask_dir.mkdir()
    sidecar = {}
    for r in manifest.records:
        image = read_image(manifest.image_file(r))
        dets = infer_detections(model, image)
        write_mask(mask_dir / f"{r.sample_id}{DEFAULT_MASK_SUFFIX}", select_primary_mask(dets, image.shape[:2], model.config.confidence_threshold))
        sidecar[r.sample_id] = [[list(d.box), round(d.score, 6)] for d in dets]
    _write_json(out / "detections.json", sidecar)


def _stage_crop(run: _Run, out: Path) -> None:
    crop_corpus(run.manifest("split/manifest.csv"), run.stage_dir("predict_masks") / "masks", run.config.crop, out)


def _stage_train_cls_cropped(run: _Run, out: Path) -> None:
    config = run.config.cls_cropped
    if run.config.finetune_cropped:
        config = ClsConfig(**{**config.to_json(), "init_checkpoint": str(run.stage_dir("train_cls") / "classifier.ckpt")})
    _train_cls(run.cropped_manifest(), config, out)


def _classifier_report(model_path: Path, manifest: DatasetManifest, seg_pairs, seg_ids, model_id: str, out: Path) -> MetricsReport:
    model = load_classifier(model_path)
    val = manifest.split_records("val")
    probs = predict_probs(model, [read_image(manifest.image_file(r)) for r in val])
    write_predictions_csv([r.sample_id for r in val], probs, out / "predictions.csv")
    return build_report(
        seg_pairs=seg_pairs,
        seg_sample_ids=seg_ids,
        true_labels=[r.label for r in val],
        pred_labels=np.argmax(probs, axis=1),
        cls_sample_ids=[r.sample_id for r in val],
        model_id=model_id,
        corpus_id=run_corpus_id(manifest),
    )


def run_corpus_id(manifest: DatasetManifest) -> str:
    return hashlib.sha256("\n".join(manifest.sample_ids).encode()).hexdigest()[:16]


def _stage_evaluate(run: _Run, out: Path) -> None:
    seg_manifest = run.manifest("split/seg_manifest.csv")
    pred_dir = run.stage_dir("predict_masks") / "masks"
    seg_val = [r for r in seg_manifest.split_records("val") if r.mask_path is not None]
    seg_pairs = [
        (read_mask(pred_dir / f"{r.sample_id}{DEFAULT_MASK_SUFFIX}"), read_mask(seg_manifest.mask_file(r))) for r in seg_val
    ] or None
    seg_ids = [r.sample_id for r in seg_val] or None
    for name, stage, manifest in (
        ("baseline", "train_cls", run.manifest("split/manifest.csv")),
        ("cropped", "train_cls_cropped", run.cropped_manifest()),
    ):
        (out / name).mkdir()
        report = _classifier_report(run.stage_dir(stage) / "classifier.ckpt", manifest, seg_pairs, seg_ids, f"{run.config.run_id}/{name}", out / name)
        save_report(report, out / name / "report.json")


def _stage_report(run: _Run, out: Path) -> None:
    ev = run.stage_dir("evaluate")
    for name in ("baseline", "cropped"):
        render_report(load_report(ev / name / "report.json"), out / name)
    compare_runs(ev / "baseline" / "report.json", ev / "cropped" / "report.json", out=out)


STAGE_FUNCTIONS = {
    "ingest": _stage_ingest,
    "split": _stage_split,
    "train_cls": _stage_train_cls,
    "transfer": _stage_transfer,
    "train_seg": _stage_train_seg,
    "predict_masks": _stage_predict_masks,
    "crop": _stage_crop,
    "train_cls_cropped": _stage_train_cls_cropped,
    "evaluate": _stage_evaluate,
    "report": _stage_report,
}


def _append_ledger(run_dir: Path, entry: dict) -> None:
    path = run_dir / RUN_LEDGER
    ledger = _read_json(path) if path.exists() else {"stages": []}
    ledger["stages"].append(entry)
    _write_json(path, ledger)


def _run_stage_locked(config: ExperimentConfig, stage: str) -> StageResult:
    run = _Run(config)
    input_hashes = {}
    for dep in DEPENDENCIES[stage]:
        record_path = run.stage_dir(dep) / STAGE_RECORD
        if not record_path.exists():
            raise MissingUpstreamArtifact(f"stage {stage!r} needs {dep!r}, which has not been run in {run.dir}")
        record = _read_json(record_path)
        if record["config_hash"] != config.config_hash(dep):
            raise ConfigHashMismatch(f"artifact of {dep!r} was produced under a different config; rerun {dep!r}")
        input_hashes[dep] = record["output_hash"]

    out = run.stage_dir(stage)
    config_hash = config.config_hash(stage)
    record_path = out / STAGE_RECORD
    entry = {"stage": stage, "config_hash": config_hash, "input_hashes": input_hashes}
    if record_path.exists():
        record = _read_json(record_path)
        if record["config_hash"] == config_hash and record["input_hashes"] == input_hashes:
            _append_ledger(run.dir, {**entry, "status": "cached", "output_hash": record["output_hash"], "duration_s": 0.0})
            return StageResult(stage, "cached", out)

    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    start = time.perf_counter()
    STAGE_FUNCTIONS[stage](run, out)
    duration = time.perf_counter() - start
    output_hash = hash_directory(out)
    _write_json(record_path, {**entry, "output_hash": output_hash})
    _append_ledger(
        run.dir,
        {
            **entry,
            "status": "completed",
            "output_hash": output_hash,
            "duration_s": round(duration, 3),
            "finished_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        },
    )
    return StageResult(stage, "completed", out, duration)


def _lock(config: ExperimentConfig) -> FileLock:
    config.run_dir.mkdir(parents=True, exist_ok=True)
    return FileLock(str(config.run_dir / ".lock"), timeout=0)


def _write_config_snapshot(config: ExperimentConfig) -> None:
    _write_json(config.run_dir / "config.json", config.to_dict())


def run_stage(config: ExperimentConfig, stage: str) -> StageResult:
    """Run (or reuse) one stage after checking its upstream artifacts."""
    if stage not in STAGE_FUNCTIONS:
        raise ValidationError(f"unknown stage {stage!r}; expected one of {STAGES}")
    try:
        with _lock(config):
            _write_config_snapshot(config)
            return _run_stage_locked(config, stage)
    except Timeout:
        raise LesionLabError(f"run directory {config.run_dir} is locked by another process") from None


def run_all(config: ExperimentConfig) -> list[StageResult]:
    """Run every stage in DAG order."""
    try:
        with _lock(config):
            _write_config_snapshot(config)
            return [_run_stage_locked(config, stage) for stage in STAGES]
    except Timeout:
        raise LesionLabError(f"run directory {config.run_dir} is locked by another process") from None


# --------------------------------------------------------------- comparison


def _resolve_report(path: str | os.PathLike) -> Path:
    path = Path(path)
    for candidate in (path, path / "report.json", path / "evaluate" / "baseline" / "report.json"):
        if candidate.is_file():
            return candidate
    raise MissingUpstreamArtifact(f"no evaluate report found at {path}")


def _delta(a, b):
    return None if a is None or b is None else b - a


def compare_runs(run_a: str | os.PathLike, run_b: str | os.PathLike, out: str | os.PathLike | None = None) -> dict:
    """Paired metric deltas (``b - a``) between two evaluate reports.

    Each argument is a ``report.json``, a directory holding one, or a run
    directory (its baseline report is used). Both reports must cover the same
    sample ids. With ``out`` the result is written to ``comparison.json``
    and ``comparison.txt`` there.
    """
    path_a, path_b = _resolve_report(run_a), _resolve_report(run_b)
    a, b = load_report(path_a), load_report(path_b)
    for field_name in ("seg_sample_ids", "cls_sample_ids"):
        ids_a, ids_b = getattr(a, field_name), getattr(b, field_name)
        if (ids_a is None) != (ids_b is None) or (ids_a is not None and sorted(ids_a) != sorted(ids_b)):
            raise SampleSetMismatch(f"{field_name} differ between {path_a} and {path_b}")

    result: dict = {"run_a": str(path_a), "run_b": str(path_b), "metrics": {}}
    for name in ("mean_jaccard", "thresholded_jaccard_0_65", "normalized_accuracy"):
        va, vb = getattr(a, name), getattr(b, name)
        result["metrics"][name] = {"a": va, "b": vb, "delta": _delta(va, vb)}
    if a.per_class_recall is not None:
        result["per_class_recall"] = {
            code: {"a": ra, "b": rb, "delta": _delta(ra, rb)}
            for code, ra, rb in zip(CLASS_CODES, a.per_class_recall, b.per_class_recall)
        }
    if a.per_image_jaccard is not None:
        ja = dict(zip(a.seg_sample_ids, a.per_image_jaccard))
        jb = dict(zip(b.seg_sample_ids, b.per_image_jaccard))
        diffs = np.array([jb[k] - ja[k] for k in sorted(ja)])
        result["paired_jaccard"] = {
            "n": int(diffs.size),
            "mean_delta": float(diffs.mean()),
            "improved": int((diffs > 0).sum()),
            "worsened": int((diffs < 0).sum()),
        }
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "comparison.json", result)
        (out / "comparison.txt").write_text(format_comparison(result), encoding="utf-8")
    return result


def format_comparison(result: dict) -> str:
    def fmt(v):
        return "-" if v is None else f"{v:.4f}"

    lines = [f"{'metric':<28}{'a':>10}{'b':>10}{'delta':>10}"]
    rows = list(result["metrics"].items()) + [(f"recall_{k}", v) for k, v in result.get("per_class_recall", {}).items()]
    for name, v in rows:
        lines.append(f"{name:<28}{fmt(v['a']):>10}{fmt(v['b']):>10}{fmt(v['delta']):>10}")
    return "\n".join(lines) + "\n"
