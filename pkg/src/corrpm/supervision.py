"""Targets, losses and parsing metrics.

Edge labels come for free from part masks: a pixel is on a boundary when
one of its 4-neighbours carries a different part label. Keypoint targets
are unnormalised Gaussians peaking at 1. Parsing and edge heads use
per-pixel cross-entropy, the pose head uses mean squared error.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from corrpm import ops
from corrpm.tensor import ShapeError, Tensor, as_tensor

REFERENCE_HEATMAP_SIGMA = 7.0
REFERENCE_FEATURE_SIZE = 96


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    visible: bool = True


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 2.0
    beta: float = 70.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


def derive_edges(mask: np.ndarray) -> np.ndarray:
    """Binary boundary map of a label mask (4-connectivity)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"derive_edges: expected a 2-D mask, got {mask.shape}")
    edges = np.zeros(mask.shape, dtype=np.uint8)
    vert = mask[1:, :] != mask[:-1, :]
    horz = mask[:, 1:] != mask[:, :-1]
    edges[1:, :] |= vert
    edges[:-1, :] |= vert
    edges[:, 1:] |= horz
    edges[:, :-1] |= horz
    return edges


def heatmap_sigma(feature_height: int) -> float:
    """Scale the 7 px deviation used at 96x96 features to another resolution."""
    return REFERENCE_HEATMAP_SIGMA * feature_height / REFERENCE_FEATURE_SIZE


def render_heatmaps(points: Sequence[Keypoint], h: int, w: int, sigma: float) -> np.ndarray:
    """One Gaussian channel per keypoint; pixel ``(r, c)`` sits at ``(x=c, y=r)``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    out = np.zeros((len(points), h, w))
    for j, p in enumerate(points):
        if p.visible:
            out[j] = np.exp(-((xs - p.x) ** 2 + (ys - p.y) ** 2) / (2.0 * sigma**2))
    return out


def resize_nearest(labels: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize sampling each output cell's centre."""
    labels = np.asarray(labels)
    sh, sw = labels.shape[-2:]
    if (sh, sw) == (h, w):
        return labels
    rows = np.minimum(((np.arange(h) + 0.5) * sh / h).astype(int), sh - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * sw / w).astype(int), sw - 1)
    return labels[..., rows[:, None], cols[None, :]]


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy of ``(…, Q, H, W)`` logits against integer labels."""
    q = logits.shape[-3]
    h, w = logits.shape[-2:]
    target = np.asarray(target)
    if target.shape[-2:] != (h, w):
        target = resize_nearest(target, h, w)
    if target.shape != logits.shape[:-3] + (h, w):
        raise ShapeError(f"cross_entropy: target {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= q):
        raise ValueError(f"cross_entropy: target labels must lie in [0, {q}), got max {target.max()}")

    z = logits.data - logits.data.max(axis=-3, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-3, keepdims=True))
    logp = z - logsumexp
    onehot = np.zeros_like(logp)
    np.put_along_axis(onehot, np.expand_dims(target, -3).astype(np.intp), 1.0, axis=-3)
    n = target.size
    loss = -(logp * onehot).sum() / n

    def _backward(g):
        return (g * (np.exp(logp) - onehot) / n,)

    return Tensor.from_op(np.array(loss), (logits,), _backward)


def mse_heatmap(pred: Tensor, target) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_heatmap: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size

    def _backward(g):
        return (g * 2.0 * diff / n,)

    return Tensor.from_op(np.array((diff**2).mean()), (pred,), _backward)


def total_loss(l_p2, l_p, l_b, l_k, weights: LossWeights = LossWeights()):
    """Parsing, auxiliary parsing, weighted edge and weighted pose terms."""
    if not any(isinstance(t, Tensor) for t in (l_p2, l_p, l_b, l_k)):
        return l_p2 + l_p + weights.alpha * l_b + weights.beta * l_k
    out = ops.add(as_tensor(l_p2), as_tensor(l_p))
    out = ops.add(out, ops.mul(as_tensor(l_b), weights.alpha))
    return ops.add(out, ops.mul(as_tensor(l_k), weights.beta))


@dataclass
class MetricsReport:
    pixel_accuracy: float
    mean_accuracy: float
    mean_iou: float
    per_class_iou: list[float]
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_iou"] = [None if math.isnan(v) else v for v in self.per_class_iou]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["per_class_iou"] = [math.nan if v is None else float(v) for v in d["per_class_iou"]]
        return cls(**d)


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, q: int) -> np.ndarray:
    """``cm[t, p]`` counts pixels with truth ``t`` predicted as ``p``."""
    pred = np.asarray(pred).astype(np.int64).ravel()
    truth = np.asarray(truth).astype(np.int64).ravel()
    if pred.shape != truth.shape:
        raise ShapeError("confusion_matrix: size mismatch")
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= q):
            raise ValueError(f"{name} labels must lie in [0, {q})")
    return np.bincount(truth * q + pred, minlength=q * q).reshape(q, q)


def _ratio(num: float, den: float, empty: float) -> float:
    return float(num / den) if den > 0 else empty


def metrics_from_confusion(cm: np.ndarray) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    truth_count = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)
    union = truth_count + pred_count - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
        recall_c = np.where(truth_count > 0, tp / truth_count, np.nan)

    # foreground pooled over classes 1..Q-1
    fg_tp = tp[1:].sum()
    fg_pred = pred_count[1:].sum()
    fg_truth = truth_count[1:].sum()
    both_empty = 1.0 if fg_pred == 0 and fg_truth == 0 else 0.0
    precision = _ratio(fg_tp, fg_pred, both_empty)
    recall = _ratio(fg_tp, fg_truth, both_empty)
    f1 = _ratio(2 * precision * recall, precision + recall, 0.0)
    return MetricsReport(
        pixel_accuracy=_ratio(tp.sum(), cm.sum(), 0.0),
        mean_accuracy=float(np.nanmean(recall_c)) if np.any(truth_count > 0) else 0.0,
        mean_iou=float(np.nanmean(iou)) if np.any(union > 0) else 0.0,
        per_class_iou=[float(v) for v in iou],
        precision=precision,
        recall=recall,
        f1=f1,
    )


def evaluate(pred: np.ndarray, truth: np.ndarray, q: int) -> MetricsReport:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"evaluate: prediction {pred.shape} vs truth {truth.shape}")
    return metrics_from_confusion(confusion_matrix(pred, truth, q))
