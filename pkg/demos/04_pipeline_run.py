# coding: utf-8

# # Full pipeline on the desk configuration
#
# Runs all ten stages (roughly a minute on one CPU core), then compares the
# baseline classifier against the one trained on lesion crops.

import sys
import tempfile
from pathlib import Path

from lesionlab.pipeline import compare_runs, format_comparison, load_config, run_all

config_path = Path(__file__).resolve().parents[1] / "configs" / "desk_separable.yaml"
output_root = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp()
config = load_config(config_path, [f"output_root={output_root}"])
run_all(config)
print("artifacts in", config.run_dir)

comparison = compare_runs(config.run_dir / "evaluate" / "baseline", config.run_dir / "evaluate" / "cropped")
print(format_comparison(comparison))

# A second call is served from cache: every stage is logged as "cached".

run_all(config)
