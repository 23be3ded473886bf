"""Sweep the two routing regularizers and print the loss / balance / I2 trade-off.

    python3 demos/lambda_sweep.py [steps]
"""
import sys
from dataclasses import replace

from himoe.config import default_config
from himoe.harness import SWEEP_COLUMNS, generate_synthetic, pareto_sweep, rows_to_csv

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cfg = default_config()
grid = [(a, b) for a in (0.0, 0.1, 0.4) for b in (0.0, 0.05, 0.2)]
rows = pareto_sweep(replace(cfg.train, steps=steps), grid, generate_synthetic(cfg.data))
print(rows_to_csv(rows, SWEEP_COLUMNS))

# larger lambda_intra sharpens each token's routing, which shows up as higher I2
for r in rows:
    if r["lambda_inter"] == 0.0:
        print(f"lambda_intra={r['lambda_intra']:<4} I2={r['final_collision_mi']:.4f}")
