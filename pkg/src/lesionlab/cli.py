"""``lesionlab`` command line entry point.

Exit codes: 0 success, 1 other failure, 2 validation error, 3 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import LesionLabError, MissingArtifactError, ValidationError
from .pipeline import compare_runs, load_config, run_all, run_stage

VERB_STAGES = {
    "ingest": ["ingest"],
    "synth": ["ingest"],
    "split": ["split"],
    "train-cls": ["train_cls"],
    "transfer": ["transfer"],
    "train-seg": ["train_seg"],
    "predict": ["predict_masks"],
    "crop": ["crop"],
    "evaluate": ["evaluate"],
    "report": ["report"],
}

log = logging.getLogger("lesionlab")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lesionlab", description="Skin-lesion segmentation and diagnosis pipeline.")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in list(VERB_STAGES) + ["run-all"]:
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True, help="YAML or JSON experiment config")
        p.add_argument("--stage-override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, e.g. seg.epochs=3 (repeatable)")
        if verb == "train-cls":
            p.add_argument("--cropped", action="store_true", help="train on the cropped corpus")
    p = sub.add_parser("compare")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--out", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.verb == "compare":
            result = compare_runs(args.run_a, args.run_b, out=args.out)
            print(json.dumps(result, indent=2))
            return 0
        config = load_config(args.config, args.stage_override)
        if args.verb == "run-all":
            results = run_all(config)
        else:
            if args.verb == "synth" and config.synth_spec is None:
                raise ValidationError("'synth' needs a config with corpus.synth")
            stages = ["train_cls_cropped"] if getattr(args, "cropped", False) else VERB_STAGES[args.verb]
            results = [run_stage(config, s) for s in stages]
        for r in results:
            log.info("%-18s %-9s %6.1fs  %s", r.stage, r.status, r.duration_s, r.path)
        return 0
    except ValidationError as exc:
        log.error("validation error: %s", exc)
        return 2
    except MissingArtifactError as exc:
        log.error("missing artifact: %s", exc)
        return 3
    except LesionLabError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
