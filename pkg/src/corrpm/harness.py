"""Training loop, poly learning-rate schedule, SGD and the ablation sweep."""

from __future__ import annotations

import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from corrpm import cpmt
from corrpm.model import ModelConfig, Variant, init_params, model_forward
from corrpm.ops import bilinear_upsample
from corrpm.supervision import (
    Keypoint,
    LossWeights,
    MetricsReport,
    confusion_matrix,
    cross_entropy,
    derive_edges,
    heatmap_sigma,
    metrics_from_confusion,
    mse_heatmap,
    render_heatmaps,
    resize_nearest,
    total_loss,
)
from corrpm.synthdata import SampleRecord, augment
from corrpm.tensor import OpCounter, ParamStore, Tensor, backward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    total_iters: int = 250
    batch_size: int = 8
    loss_weights: LossWeights = LossWeights()
    variant: str = "CorrPM"
    seed: int = 0
    feature_width: int = 64
    backbone_widths: tuple[int, ...] = (16, 32, 64, 64, 64)
    canvas: int = 64
    augment: bool = False
    checkpoint_every: int = 0
    eval_every_epoch: bool = True

    def __post_init__(self):
        if self.total_iters < 1 or self.batch_size < 1:
            raise ValueError("total_iters and batch_size must be at least 1")
        Variant.parse(self.variant)

    def model_config(self, q: int, j: int) -> ModelConfig:
        return ModelConfig(q=q, j=j, feature_width=self.feature_width, backbone_widths=tuple(self.backbone_widths))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = Variant.parse(self.variant).value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss_weights"] = LossWeights(**d["loss_weights"])
        d["backbone_widths"] = tuple(d["backbone_widths"])
        return cls(**d)


# Learning rate of the 64x64 synthetic benchmark. With the 1e-3 default every
# variant is still predicting all-background after 250 iterations.
BENCHMARK_LR = 0.03


def benchmark_config(**overrides) -> TrainConfig:
    """Config of the synthetic ablation benchmark: 250 iterations at batch 8, i.e. 10 epochs of 200 samples."""
    return replace(TrainConfig(base_lr=BENCHMARK_LR, total_iters=250, batch_size=8), **overrides)


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    """``base_lr * (1 - iteration / total_iters) ** poly_power``."""
    if not 0 <= iteration <= cfg.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters}]")
    return cfg.base_lr * (1.0 - iteration / cfg.total_iters) ** cfg.poly_power


def _decays(name: str) -> bool:
    return name.endswith(".weight") and not name.startswith("hnl.out.")


def sgd_step(params: ParamStore, lr: float, cfg: TrainConfig, velocity: dict[str, np.ndarray]) -> ParamStore:
    """Momentum SGD with L2 weight decay; resets gradients afterwards.

    ``velocity`` holds the momentum buffers and is updated in place.
    """
    for name, t in params.items():
        g = params.grad(name)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        step = g + cfg.weight_decay * t.data if cfg.weight_decay and _decays(name) else g.copy()
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(t.data)
        v *= cfg.momentum
        v += step
        params.set(name, t.data - lr * v)
    params.zero_grad()
    return params


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    images: np.ndarray  # (B, 3, M, N), centred
    masks: np.ndarray  # (B, M, N) full resolution
    masks_small: np.ndarray  # (B, H, W)
    edges_small: np.ndarray  # (B, H, W)
    heatmaps: np.ndarray  # (B, J, H, W)


def feature_keypoints(points: Sequence[Keypoint], canvas: tuple[int, int], size: tuple[int, int]) -> list[Keypoint]:
    """Map canvas pixel coordinates onto a coarser grid covering the same area."""
    (m, n), (h, w) = canvas, size
    return [Keypoint((p.x + 0.5) * w / n - 0.5, (p.y + 0.5) * h / m - 0.5, p.visible) for p in points]


def make_batch(samples: Sequence[SampleRecord], feature_size: tuple[int, int]) -> Batch:
    h, w = feature_size
    sigma = heatmap_sigma(h)
    images = np.stack([s.image for s in samples]) - 0.5
    masks = np.stack([s.mask for s in samples])
    small = resize_nearest(masks, h, w)
    edges = np.stack([derive_edges(m) for m in small])
    heat = np.stack([
        render_heatmaps(feature_keypoints(s.keypoints, s.mask.shape, (h, w)), h, w, sigma) for s in samples
    ])
    return Batch(images, masks, small, edges, heat)


def feature_size_for(canvas: tuple[int, int]) -> tuple[int, int]:
    return canvas[0] // 4, canvas[1] // 4


def compute_losses(out, batch: Batch, weights: LossWeights) -> dict[str, Tensor | float]:
    l_p2 = cross_entropy(out.parse_logits, batch.masks_small)
    l_p = cross_entropy(out.parse_logits_aux, batch.masks_small)
    l_b = cross_entropy(out.edge_logits, batch.edges_small) if out.edge_logits is not None else 0.0
    l_k = mse_heatmap(out.pose_heatmaps, batch.heatmaps) if out.pose_heatmaps is not None else 0.0
    return {"l_p2": l_p2, "l_p": l_p, "l_b": l_b, "l_k": l_k, "total": total_loss(l_p2, l_p, l_b, l_k, weights)}


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


# ---------------------------------------------------------------- evaluation


def predict(params: ParamStore, model_cfg: ModelConfig, variant, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Label maps at input resolution (logits upsampled bilinearly, then argmax)."""
    m, n = images.shape[-2:]
    out = []
    for start in range(0, len(images), batch_size):
        chunk = Tensor(images[start:start + batch_size])
        logits = model_forward(chunk, params, model_cfg, variant).parse_logits
        out.append(bilinear_upsample(logits, m, n).data.argmax(axis=1))
    return np.concatenate(out).astype(np.uint8)


def evaluate_params(params: ParamStore, model_cfg: ModelConfig, variant, samples: Sequence[SampleRecord]) -> MetricsReport:
    """Dataset-level metrics from one confusion matrix accumulated over all samples."""
    images = np.stack([s.image for s in samples]) - 0.5
    pred = predict(params, model_cfg, variant, images)
    cm = confusion_matrix(pred, np.stack([s.mask for s in samples]), model_cfg.q)
    return metrics_from_confusion(cm)


def forward_macs(params: ParamStore, model_cfg: ModelConfig, variant, canvas: tuple[int, int]) -> int:
    """MACs of a single-image forward pass."""
    with OpCounter() as counter:
        model_forward(Tensor(np.zeros((1, model_cfg.in_channels) + tuple(canvas))), params, model_cfg, variant)
    return counter.total


# ---------------------------------------------------------------- training


@dataclass
class RunRecord:
    config: dict
    losses: list[dict[str, float]] = field(default_factory=list)
    epoch_metrics: list[MetricsReport] = field(default_factory=list)
    checkpoint: str | None = None
    wall_seconds: float = 0.0
    params: ParamStore | None = field(default=None, repr=False)

    @property
    def final_metrics(self) -> MetricsReport | None:
        return self.epoch_metrics[-1] if self.epoch_metrics else None

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "losses": self.losses,
            "epoch_metrics": [m.to_dict() for m in self.epoch_metrics],
            "checkpoint": self.checkpoint,
            "wall_seconds": self.wall_seconds,
        }


def split_dataset(samples: Sequence[SampleRecord], eval_fraction: float = 0.2) -> tuple[list, list]:
    """Deterministic split by seed order: the last ``eval_fraction`` is held out."""
    ordered = sorted(samples, key=lambda s: s.seed)
    n_eval = int(round(len(ordered) * eval_fraction)) if len(ordered) > 1 else 0
    return ordered[: len(ordered) - n_eval], ordered[len(ordered) - n_eval:]


def _checkpoint(params: ParamStore, out_dir: Path, tag: str, cfg: TrainConfig, model_cfg: ModelConfig) -> str:
    header = {"train_config": cfg.to_dict(), "model_config": asdict(model_cfg), "tag": tag}
    return str(cpmt.save_checkpoint(out_dir / tag, params, header))


def train(
    cfg: TrainConfig,
    dataset: Sequence[SampleRecord],
    out_dir=None,
    eval_data: Sequence[SampleRecord] | None = None,
    q: int = 7,
) -> RunRecord:
    """Train one model end-to-end; deterministic for a given config and data.

    Without ``eval_data`` the dataset is split 80/20 by seed order.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    if eval_data is None:
        train_set, eval_set = split_dataset(dataset)
    else:
        train_set, eval_set = list(dataset), list(eval_data)
    variant = Variant.parse(cfg.variant)
    canvas = train_set[0].mask.shape
    model_cfg = cfg.model_config(q=q, j=len(train_set[0].keypoints))
    fsize = feature_size_for(canvas)
    params = init_params(model_cfg, variant, cfg.seed)
    velocity: dict[str, np.ndarray] = {}
    record = RunRecord(config=cfg.to_dict())
    out_dir = Path(out_dir) if out_dir is not None else None

    rng = np.random.default_rng(cfg.seed)
    iters_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    fixed_batches = None if cfg.augment else make_batch(train_set, fsize)
    order = np.arange(len(train_set))
    start = time.perf_counter()

    for it in range(cfg.total_iters):
        pos = it % iters_per_epoch
        if pos == 0:
            order = rng.permutation(len(train_set))
        idx = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        if fixed_batches is None:
            picked = [augment(train_set[i], seed=int(rng.integers(2**63))) for i in idx]
            batch = make_batch(picked, fsize)
        else:
            batch = Batch(*(getattr(fixed_batches, f)[idx] for f in Batch.__dataclass_fields__))

        out = model_forward(Tensor(batch.images), params, model_cfg, variant)
        losses = compute_losses(out, batch, cfg.loss_weights)
        total = losses["total"]
        if not math.isfinite(total.item()):
            raise TrainingError(f"non-finite total loss at iteration {it}")
        record.losses.append({k: _value(v) for k, v in losses.items()})
        backward(total, params)
        sgd_step(params, poly_lr(it, cfg), cfg, velocity)

        last = it == cfg.total_iters - 1
        if eval_set and ((cfg.eval_every_epoch and pos == iters_per_epoch - 1) or last):
            record.epoch_metrics.append(evaluate_params(params, model_cfg, variant, eval_set))
            log.debug("iter %d mIoU %.4f", it, record.epoch_metrics[-1].mean_iou)
        if out_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0 and not last:
            _checkpoint(params, out_dir, f"iter_{it + 1:06d}", cfg, model_cfg)

    if out_dir is not None:
        record.checkpoint = _checkpoint(params, out_dir, "final", cfg, model_cfg)
        (out_dir / "run.json").write_text(json.dumps(record.to_dict(), sort_keys=True))
    record.wall_seconds = time.perf_counter() - start
    record.params = params
    return record


def load_model(checkpoint) -> tuple[ParamStore, ModelConfig, TrainConfig]:
    params, header = cpmt.load_checkpoint(checkpoint)
    model_cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in header["model_config"].items()})
    return params, model_cfg, TrainConfig.from_dict(header["train_config"])


# ---------------------------------------------------------------- ablation


@dataclass
class AblationTable:
    rows: list[dict]

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows}, indent=1, sort_keys=True)

    def mean_iou(self, variant) -> list[float]:
        tag = Variant.parse(variant).value
        return [r["metrics"]["mean_iou"] for r in self.rows if r["variant"] == tag and r.get("metrics")]

    def median_mean_iou(self, variant) -> float:
        return statistics.median(self.mean_iou(variant))

    def render(self, class_names: Sequence[str] | None = None) -> str:
        """Text table: one line per variant, median over seeds of per-class IoU and mIoU."""
        variants = list(dict.fromkeys(r["variant"] for r in self.rows))
        q = next((len(r["metrics"]["per_class_iou"]) for r in self.rows if r.get("metrics")), 0)
        names = list(class_names) if class_names else [f"c{i}" for i in range(q)]
        header = ["Method"] + [n[:8] for n in names] + ["mIoU", "seeds"]
        lines = [header]
        for v in variants:
            ok = [r for r in self.rows if r["variant"] == v and r.get("metrics")]
            cells = [v]
            for c in range(q):
                vals = [r["metrics"]["per_class_iou"][c] for r in ok if r["metrics"]["per_class_iou"][c] is not None]
                cells.append(f"{100 * statistics.median(vals):.2f}" if vals else "-")
            cells.append(f"{100 * statistics.median([r['metrics']['mean_iou'] for r in ok]):.2f}" if ok else "failed")
            cells.append(str(len(ok)))
            lines.append(cells)
        widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
        return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in lines)


def ablate(
    base_cfg: TrainConfig,
    variants: Sequence,
    seeds: Sequence[int],
    dataset: Sequence[SampleRecord],
    out_dir=None,
    eval_data: Sequence[SampleRecord] | None = None,
    q: int = 7,
) -> AblationTable:
    """Train every (variant, seed) cell under the same budget and data.

    A failing cell is recorded with its error and the sweep carries on.
    """
    if not variants or not seeds:
        raise ValueError("need at least one variant and one seed")
    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []
    for variant in variants:
        v = Variant.parse(variant)
        for seed in seeds:
            cfg = replace(base_cfg, variant=v.value, seed=int(seed))
            cell_dir = out_dir / f"{v.value}_seed{seed}" if out_dir is not None else None
            row = {"variant": v.value, "seed": int(seed), "metrics": None, "wall_seconds": 0.0, "mac_count": None}
            t0 = time.perf_counter()
            try:
                run = train(cfg, dataset, out_dir=cell_dir, eval_data=eval_data, q=q)
                row["metrics"] = run.final_metrics.to_dict() if run.final_metrics else None
                canvas = dataset[0].mask.shape
                row["mac_count"] = forward_macs(run.params, cfg.model_config(q, len(dataset[0].keypoints)), v, canvas)
            except Exception as exc:  # noqa: BLE001 - recorded per row by design
                log.warning("ablation cell %s/%s failed: %s", v.value, seed, exc)
                row["error"] = f"{type(exc).__name__}: {exc}"
            row["wall_seconds"] = time.perf_counter() - t0
            rows.append(row)
            log.info("%s seed %s mIoU %s (%.1fs)", v.value, seed,
                     None if row["metrics"] is None else round(row["metrics"]["mean_iou"], 4), row["wall_seconds"])
    table = AblationTable(rows)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.json").write_text(table.to_json())
        (out_dir / "ablation.txt").write_text(table.render() + "\n")
    return table
