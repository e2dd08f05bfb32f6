"""Ready-made gradient check problems for the ops, encoders, fusion block and full model.

Every problem is evaluated at a generic point: zero-initialised parameters
(biases, the fusion output transform) are replaced by small random values.
At the all-zero starting point many ReLU inputs sit exactly on the kink, where
the tape takes the right-hand slope and central differences see half of it.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from corrpm import ops
from corrpm.gradcheck import GradcheckReport, gradcheck
from corrpm.model import (
    ModelConfig,
    Variant,
    backbone_forward,
    edge_encoder,
    hnl_forward,
    init_params,
    model_forward,
    parsing_encoder,
    pose_encoder,
)
from corrpm.supervision import (
    Keypoint,
    LossWeights,
    cross_entropy,
    derive_edges,
    heatmap_sigma,
    mse_heatmap,
    render_heatmaps,
    total_loss,
)
from corrpm.tensor import ParamStore, Tensor

SMALL_MODEL = ModelConfig(q=4, j=3, feature_width=6, backbone_widths=(3, 4, 5, 5, 5), aspp_rates=(1, 2, 3))
OP_NAMES = (
    "conv2d", "transposed_conv2d", "bilinear_upsample", "concat_channels", "matmul", "softmax_rows",
    "relu", "add", "mul", "sum", "mean", "reshape", "transpose", "cross_entropy", "mse_heatmap",
)


def jitter_params(params: ParamStore, seed: int, scale: float = 0.1) -> ParamStore:
    """Copy of ``params`` with every all-zero tensor replaced by uniform noise."""
    rng = np.random.default_rng(seed)
    out = params.copy()
    for name in out:
        value = out[name].data
        if not value.any():
            out.set(name, rng.uniform(-scale, scale, value.shape))
    return out


def _probe_loss(outputs: list[Tensor], rng: np.random.Generator, probes: list) -> Tensor:
    # fixed random projection of every output onto a scalar
    if not probes:
        probes.extend(rng.standard_normal(o.shape) for o in outputs)
    total = ops.sum(ops.mul(outputs[0], probes[0]))
    for o, p in zip(outputs[1:], probes[1:]):
        total = ops.add(total, ops.sum(ops.mul(o, p)))
    return total


# ---------------------------------------------------------------- single ops


def _away_from_zero(rng, shape, low=0.1):
    return rng.choice([-1.0, 1.0], shape) * rng.uniform(low, 1.0, shape)


def op_problem(op: str, seed: int) -> tuple[ParamStore, Callable[[], Tensor]]:
    """A random-shape scalar function exercising one op, plus its inputs."""
    rng = np.random.default_rng(seed)
    p = ParamStore()
    dim = lambda lo, hi: int(rng.integers(lo, hi + 1))  # noqa: E731
    probes: list = []

    if op == "conv2d":
        k, stride, pad, dil = dim(1, 3), dim(1, 2), dim(0, 2), dim(1, 2)
        size = (k - 1) * dil + 1 + dim(0, 4)
        p.add("x", rng.standard_normal((dim(1, 2), dim(1, 3), size, size + dim(0, 2))))
        c_in = p["x"].shape[1]
        p.add("w", rng.standard_normal((dim(1, 4), c_in, k, k)))
        p.add("b", rng.standard_normal(p["w"].shape[0]))
        fn = lambda: [ops.conv2d(p["x"], p["w"], p["b"], stride=stride, pad=pad, dilation=dil)]  # noqa: E731
    elif op == "transposed_conv2d":
        k, stride = dim(1, 4), dim(1, 2)
        pad = dim(0, (k - 1) // 2)
        p.add("x", rng.standard_normal((dim(1, 2), dim(1, 3), dim(1, 4), dim(1, 4))))
        p.add("w", rng.standard_normal((p["x"].shape[1], dim(1, 3), k, k)))
        p.add("b", rng.standard_normal(p["w"].shape[1]))
        fn = lambda: [ops.transposed_conv2d(p["x"], p["w"], p["b"], stride=stride, pad=pad)]  # noqa: E731
    elif op == "bilinear_upsample":
        p.add("x", rng.standard_normal((dim(1, 3), dim(1, 4), dim(1, 4))))
        oh, ow = dim(1, 9), dim(1, 9)
        fn = lambda: [ops.bilinear_upsample(p["x"], oh, ow)]  # noqa: E731
    elif op == "concat_channels":
        h, w = dim(1, 4), dim(1, 4)
        for i in range(dim(1, 3)):
            p.add(f"x{i}", rng.standard_normal((dim(1, 3), h, w)))
        fn = lambda: [ops.concat_channels([p[n] for n in p])]  # noqa: E731
    elif op == "matmul":
        batch = (dim(1, 2),) * dim(0, 1)
        m, k, n = dim(1, 5), dim(1, 5), dim(1, 5)
        p.add("a", rng.standard_normal(batch + (m, k)))
        p.add("b", rng.standard_normal(batch + (k, n)))
        fn = lambda: [ops.matmul(p["a"], p["b"])]  # noqa: E731
    elif op == "softmax_rows":
        p.add("x", 2.0 * rng.standard_normal((dim(1, 3), dim(1, 6))))
        fn = lambda: [ops.softmax_rows(p["x"])]  # noqa: E731
    elif op == "relu":
        p.add("x", _away_from_zero(rng, (dim(1, 4), dim(1, 5))))
        fn = lambda: [ops.relu(p["x"])]  # noqa: E731
    elif op in ("add", "mul"):
        shape = (dim(1, 3), dim(1, 4), dim(1, 4))
        p.add("a", rng.standard_normal(shape))
        # second operand broadcasts along some axes
        p.add("b", rng.standard_normal(tuple(s if rng.random() < 0.5 else 1 for s in shape)[dim(0, 2):]))
        f2 = getattr(ops, op)
        fn = lambda: [f2(p["a"], p["b"])]  # noqa: E731
    elif op in ("sum", "mean"):
        p.add("x", rng.standard_normal((dim(1, 4), dim(1, 4))))
        f1 = getattr(ops, op)
        fn = lambda: [f1(p["x"])]  # noqa: E731
    elif op == "reshape":
        a, b = dim(1, 4), dim(1, 4)
        p.add("x", rng.standard_normal((a, b, 2)))
        fn = lambda: [ops.reshape(p["x"], (2 * b, a))]  # noqa: E731
    elif op == "transpose":
        p.add("x", rng.standard_normal((dim(1, 3), dim(1, 3), dim(1, 3))))
        axes = tuple(rng.permutation(3))
        fn = lambda: [ops.transpose(p["x"], axes)]  # noqa: E731
    elif op == "cross_entropy":
        q, h, w = dim(2, 5), dim(1, 4), dim(1, 4)
        p.add("z", rng.standard_normal((dim(1, 2), q, h, w)))
        target = rng.integers(0, q, (p["z"].shape[0], h, w))
        return p, lambda: cross_entropy(p["z"], target)
    elif op == "mse_heatmap":
        p.add("y", rng.standard_normal((dim(1, 3), dim(1, 4), dim(1, 4))))
        target = rng.random(p["y"].shape)
        return p, lambda: mse_heatmap(p["y"], target)
    else:
        raise ValueError(f"unknown op {op!r}")
    return p, lambda: _probe_loss(fn(), rng, probes)


def check_ops(n_shapes: int = 20, epsilon: float = 1e-4, tolerance: float = 1e-4, seed: int = 0) -> dict[str, list[GradcheckReport]]:
    """``n_shapes`` random-shape gradient checks per op."""
    reports: dict[str, list[GradcheckReport]] = {}
    for op in OP_NAMES:
        reports[op] = []
        for i in range(n_shapes):
            params, f = op_problem(op, seed * 1000 + i)
            reports[op].append(gradcheck(f, params, epsilon=epsilon, tolerance=tolerance))
    return reports


# ---------------------------------------------------------------- model parts


def _image(seed: int, size: int, batch: int = 1) -> Tensor:
    return Tensor(np.random.default_rng(seed).uniform(-0.5, 0.5, (batch, 3, size, size)))


def check_encoder(which: str, seed: int = 0, epsilon: float = 1e-4, tolerance: float = 1e-4,
                  max_entries: int | None = 6, cfg: ModelConfig = SMALL_MODEL, size: int = 32) -> GradcheckReport:
    """Gradients of one encoder (``parsing``, ``edge`` or ``pose``) and the backbone beneath it."""
    if which not in ("parsing", "edge", "pose"):
        raise ValueError(f"unknown encoder {which!r}")
    params = jitter_params(init_params(cfg, Variant.CORRPM, seed), seed + 1)
    x = _image(seed + 2, size)
    rng, probes = np.random.default_rng(seed + 3), []

    def f():
        st = backbone_forward(x, params)
        if which == "parsing":
            outputs = parsing_encoder(st, params, cfg)
        elif which == "edge":
            outputs = edge_encoder(st, params)
        else:
            outputs = pose_encoder(st, params)
        return _probe_loss(list(outputs), rng, probes)

    names = [n for n in params if n.startswith((which + ".", "backbone."))]
    return gradcheck(f, params, epsilon=epsilon, tolerance=tolerance, max_entries=max_entries, names=names, seed=seed)


def check_hnl(seed: int = 0, epsilon: float = 1e-4, tolerance: float = 1e-4, c: int = 5, h: int = 3, w: int = 4,
              q: int = 3) -> GradcheckReport:
    """Gradients of the fusion block and classifier under a cross-entropy loss."""
    cfg = ModelConfig(q=q, feature_width=c)
    params = jitter_params(init_params(cfg, Variant.CORRPM, seed), seed + 1, scale=0.5)
    rng = np.random.default_rng(seed + 2)
    f_p, f_b, f_k = (Tensor(rng.standard_normal((c, h, w))) for _ in range(3))
    target = rng.integers(0, q, (h, w))
    names = [n for n in params if n.startswith(("hnl.", "head."))]
    return gradcheck(lambda: cross_entropy(hnl_forward(f_p, f_b, f_k, params, Variant.CORRPM).parse_logits, target),
                     params, epsilon=epsilon, tolerance=tolerance, names=names, seed=seed)


def check_end_to_end(seed: int = 0, epsilon: float = 1e-4, tolerance: float = 1e-3, max_entries: int | None = 4,
                     cfg: ModelConfig = SMALL_MODEL, size: int = 32, weights: LossWeights = LossWeights()) -> GradcheckReport:
    """Gradients of the full weighted training loss of the fused model on a 32x32 input."""
    params = jitter_params(init_params(cfg, Variant.CORRPM, seed), seed + 1)
    rng = np.random.default_rng(seed + 2)
    x = _image(seed + 3, size, batch=2)
    fh = fw = size // 4
    mask = rng.integers(0, cfg.q, (2, fh, fw))
    edges = np.stack([derive_edges(m) for m in mask])
    heat = np.stack([
        render_heatmaps([Keypoint(*rng.uniform(0, fw - 1, 2)) for _ in range(cfg.j)], fh, fw, heatmap_sigma(fh))
        for _ in range(2)
    ])

    def f():
        out = model_forward(x, params, cfg, Variant.CORRPM)
        return total_loss(cross_entropy(out.parse_logits, mask), cross_entropy(out.parse_logits_aux, mask),
                          cross_entropy(out.edge_logits, edges), mse_heatmap(out.pose_heatmaps, heat), weights)

    return gradcheck(f, params, epsilon=epsilon, tolerance=tolerance, max_entries=max_entries, seed=seed)
