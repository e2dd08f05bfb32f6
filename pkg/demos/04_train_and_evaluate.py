"""Train the fused model briefly and evaluate it on held-out figures.

Run: python demos/04_train_and_evaluate.py [iterations]
The default 150 iterations take about a minute. The full benchmark uses 250.
"""

import sys
import tempfile

import numpy as np

from corrpm import GeneratorConfig, benchmark_config, evaluate, load_model, train
from corrpm.harness import predict
from corrpm.synthdata import PART_NAMES, generate_many

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 150
data = generate_many(GeneratorConfig(), range(120))
train_set, eval_set = data[:100], data[100:]

cfg = benchmark_config(variant="CorrPM", total_iters=iters, seed=0)
out_dir = tempfile.mkdtemp()
run = train(cfg, train_set, out_dir=out_dir, eval_data=eval_set)

first, last = run.losses[0], run.losses[-1]
print("loss terms  " + "  ".join(f"{k}: {first[k]:.3f} -> {last[k]:.3f}" for k in first))
for i, m in enumerate(run.epoch_metrics):
    print(f"eval {i}: mIoU {100 * m.mean_iou:5.2f}  pixel acc {100 * m.pixel_accuracy:5.2f}")

# Reload the checkpoint and score it again from scratch.
params, model_cfg, loaded = load_model(run.checkpoint)
images = np.stack([s.image for s in eval_set]) - 0.5
pred = predict(params, model_cfg, loaded.variant, images)
report = evaluate(pred, np.stack([s.mask for s in eval_set]), model_cfg.q)
for name, iou in zip(PART_NAMES, report.per_class_iou):
    print(f"  {name:>10}: {100 * iou:5.2f}")
print(f"reloaded checkpoint mIoU {100 * report.mean_iou:.2f} (matches: {report.mean_iou == run.final_metrics.mean_iou})")
