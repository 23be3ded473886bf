"""Route one batch through the four variants and print what each one selects.

    python3 demos/routing_walkthrough.py
"""
import numpy as np

from himoe.harness import default_router
from himoe.metrics import collision_mutual_information, expert_counts, per_token_coverage
from himoe.numerics import make_rng
from himoe.router import EmaState, group_mass, route

rng = make_rng(7)
# skewed logits: experts 0 and 1 (group 0) are favoured for every token
logits = rng.normal(size=(6, 8)) + np.array([2.0, 1.5, 0, 0, 0, 0, 0, 0])

for variant in ("flat", "flat_lossfree_bias", "grouped", "hi_moe"):
    cfg = default_router(variant=variant)
    state = EmaState.zeros(cfg.num_experts)
    out, state = route(logits, state, cfg)
    print(f"\n{variant}")
    print("  selected experts per token:", [np.flatnonzero(m).tolist() for m in out.mask])
    print("  groups hit per token:      ", per_token_coverage(out, cfg.partition).tolist())
    print("  expert counts:             ", expert_counts(out.mask).astype(int).tolist())
    print("  group mass of token 0:     ", np.round(group_mass(out, cfg.partition)[0], 3).tolist())
    print(f"  I2(X;E) = {collision_mutual_information(out.pi):.4f} nats")

# the EMA correction only bites once a running mean exists
cfg = default_router(variant="hi_moe", bias_strength=0.5)
state = EmaState.zeros(8)
for step in range(20):
    out, state = route(logits, state, cfg)
print("\nhi_moe after 20 batches with tau = 0.5")
print("  EMA logit mean:", np.round(state.g_bar, 2).tolist())
print("  mean pi:       ", np.round(out.pi.mean(axis=0), 3).tolist())
