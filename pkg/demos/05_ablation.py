"""Sweep model variants over seeds and print a per-class IoU table.

Run: python demos/05_ablation.py            (quick: 2 seeds, 150 iterations, a few minutes)
     python demos/05_ablation.py --full     (benchmark: 5 seeds, 250 iterations, ~15 min)

The quick run stops while the multi-factor models are still catching up. They
carry extra losses and start slower, so at 150 iterations the plain baseline
usually leads. Only the full budget reflects the benchmark ordering.
"""

import sys

from corrpm import GeneratorConfig, ablate, benchmark_config
from corrpm.synthdata import PART_NAMES, generate_many

full = "--full" in sys.argv
data = generate_many(GeneratorConfig(), range(250))
train_set, eval_set = data[:200], data[200:]
seeds = range(5) if full else range(2)
cfg = benchmark_config() if full else benchmark_config(total_iters=150)

table = ablate(cfg, ["P", "PB", "PK", "CorrPM"], list(seeds), train_set, eval_data=eval_set)
print(table.render(PART_NAMES))
for v in ("P", "PB", "PK", "CorrPM"):
    print(f"{v:>7}: per-seed mIoU " + " ".join(f"{100 * x:.1f}" for x in table.mean_iou(v)))
