"""The heterogeneous non-local block: relation map, identity at init, cost.

Run: python demos/03_fusion_block.py
"""

import numpy as np

from corrpm import ModelConfig, Tensor, Variant, count_fusion_macs, init_params, model_forward
from corrpm.model import hnl_forward

rng = np.random.default_rng(0)
c, h, w = 8, 4, 5
params = init_params(ModelConfig(feature_width=c), Variant.CORRPM, seed=0)
f_p, f_b, f_k = (Tensor(rng.standard_normal((c, h, w))) for _ in range(3))

# The hybrid of parsing, edge and pose features queries the parsing
# feature. Each row of the relation map is a distribution over pixels.
out = hnl_forward(f_p, f_b, f_k, params, Variant.CORRPM)
s = out.relation.data
print(f"relation map {s.shape}, row sums in [{s.sum(1).min():.12f}, {s.sum(1).max():.12f}]")

# The output transform starts at zero, so the block is a residual identity.
print("f_p2 == f_p at init:", np.array_equal(out.f_p2.data, f_p.data))

# Hence the full model's parse logits match the plain baseline at init
# when both share a seed: parameters are seeded by name.
cfg = ModelConfig()
image = Tensor(rng.uniform(-0.5, 0.5, (1, 3, 64, 64)))
logits = {v: model_forward(image, init_params(cfg, v, 3), cfg, v).parse_logits.data for v in ("P", "CorrPM")}
print("CorrPM logits == P logits at init:", np.array_equal(logits["P"], logits["CorrPM"]))

# Correlating every pair of k factor maps costs k(k-1)/2 N x N products.
# One hybrid feature costs a single product plus a projection linear in k.
print(f"{'k':>2} {'HNL corr':>9} {'pair corr':>10} {'HNL MACs':>10} {'pair MACs':>11}")
for k in range(1, 7):
    cost = count_fusion_macs(k, 64, 16, 16)
    print(f"{k:>2} {cost.hnl_correlations:>9} {cost.pairwise_correlations:>10} {cost.hnl_macs:>10} {cost.pairwise_macs:>11}")
