"""Regenerate tests/data/frozen.json from the oracles alone (never from the package).

    python3 tests/make_frozen.py
"""

import json
import math
from pathlib import Path

import numpy as np

import oracles

OUT = Path(__file__).parent / "data" / "frozen.json"

# layer layout of the default toy model: hidden 64, 4 blocks, MLP ratio 4, 2x2 patches of 4 channels
HIDDEN, DEPTH, CLASSES, PATCH_DIM = 64, 4, 10, 16
LAYOUT = {"patch_embed": (HIDDEN, PATCH_DIM), "time_mlp.0": (HIDDEN, HIDDEN), "time_mlp.1": (HIDDEN, HIDDEN)}
for i in range(DEPTH):
    LAYOUT[f"blocks.{i}.qkv"] = (3 * HIDDEN, HIDDEN)
    LAYOUT[f"blocks.{i}.attn_proj"] = (HIDDEN, HIDDEN)
    LAYOUT[f"blocks.{i}.mlp_fc1"] = (4 * HIDDEN, HIDDEN)
    LAYOUT[f"blocks.{i}.mlp_fc2"] = (HIDDEN, 4 * HIDDEN)
LAYOUT["final_proj"] = (PATCH_DIM, HIDDEN)

# mixed plan: embeddings and output at FP16, two attention projections at W8/g128, the rest W4/g288
FP16 = ("patch_embed", "time_mlp.0", "time_mlp.1", "final_proj")
W8 = ("blocks.0.attn_proj", "blocks.3.attn_proj")
MIXED = {lid: (16, 64) if lid in FP16 else (8, 128) if lid in W8 else (4, 288) for lid in LAYOUT}


def main():
    aux = oracles.toy_aux_params(HIDDEN, DEPTH, CLASSES, LAYOUT)
    fp32 = oracles.packed_bytes_oracle(LAYOUT, {k: (32, 128) for k in LAYOUT}, aux)
    mixed = oracles.packed_bytes_oracle(LAYOUT, MIXED, aux)
    w4 = oracles.packed_bytes_oracle(LAYOUT, {k: (4, 288) for k in LAYOUT}, aux)

    rng = np.random.default_rng(123)
    g_vec = rng.exponential(size=50)
    spiked = oracles.early_spiked_drift(100, seed=0)
    # the count-50 schedule for this profile: the 20-step tail plus the 30 largest non-tail steps
    tail = [t for t in spiked if t >= 80]
    rest = sorted((t for t in spiked if t < 80), key=lambda t: (-spiked[t], -t))[:30]
    cov = oracles.coverage_oracle(spiked, tail + rest)

    v = np.linspace(-1.0, 1.0, 201) ** 3
    doc = {
        "aux_params": aux,
        "fp32_bytes": fp32,
        "mixed_plan": {k: list(b) for k, b in MIXED.items()},
        "mixed_bytes": mixed,
        "mixed_ratio_vs_fp32": fp32 / mixed,
        "w4g288_bytes": w4,
        "w4g288_ratio_vs_fp32": fp32 / w4,
        "gini_vector_seed": 123,
        "gini_value": oracles.gini_pairwise(g_vec),
        "spiked_coverage_k50_rho02": cov,
        "tau_cubic_p999": oracles.nearest_rank(v, 99.9),
        "tau_cubic_p90": oracles.nearest_rank(v, 90.0),
        "reference_ratio": 2575.42 / 397.24,
    }
    OUT.parent.mkdir(exist_ok=True)
    OUT.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(json.dumps({k: v for k, v in doc.items() if k != "mixed_plan"}, indent=1))
    assert math.isfinite(cov)


if __name__ == "__main__":
    main()
