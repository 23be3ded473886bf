"""Train the four routing variants on the same synthetic clusters and compare.

    python3 demos/baseline_comparison.py [steps]
"""
import sys
from dataclasses import replace

from himoe.config import default_config
from himoe.harness import SUMMARY_COLUMNS, compare_baselines, generate_synthetic, rows_to_csv

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cfg = default_config()
data = generate_synthetic(cfg.data)
rows, records = compare_baselines(replace(cfg.train, steps=steps), data)
print(rows_to_csv(rows, SUMMARY_COLUMNS))

# grouped variants touch every group for every token; flat Top-K need not
for name, rec in records.items():
    print(f"{name:20s} coverage {rec.final['coverage_mean']:.3f}  "
          f"min {rec.final['min_coverage']}  counts {rec.final['expert_counts']}")
