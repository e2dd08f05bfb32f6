"""Backbone, parsing/edge/pose encoders and the heterogeneous non-local block.

All forward functions read weights by name from a :class:`ParamStore`, so
the same code serves training, gradient checking and checkpoint reloads.
Parameters are initialised from an RNG keyed on ``(seed, name)``; two
variants built with the same seed therefore share every weight they have
in common, which is what makes the P-vs-CorrPM initial identity testable.
"""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from corrpm import ops
from corrpm.tensor import OpCounter, ParamStore, ShapeError, Tensor, as_tensor


class ConfigurationError(ValueError):
    pass


class Variant(str, enum.Enum):
    """The ten fusion wirings of the ablation study."""

    P = "P"
    PP = "PP"
    P_B = "P+B"
    P_K = "P+K"
    P_B_K = "P+B+K"
    PB = "PB"
    PK = "PK"
    PBB = "PBB"
    PKK = "PKK"
    CORRPM = "CorrPM"

    @classmethod
    def parse(cls, tag) -> "Variant":
        if isinstance(tag, cls):
            return tag
        key = str(tag).strip().lower()
        for v in cls:
            if v.value.lower() == key:
                return v
        raise ConfigurationError(f"unknown ablation variant {tag!r}; expected one of {[v.value for v in cls]}")

    @property
    def factors(self) -> tuple[str, ...]:
        """Feature maps fed to fusion, in concat order ('p' parsing, 'b' edge, 'k' pose)."""
        return _FACTORS[self]

    @property
    def mode(self) -> str:
        """'plain' (head on f_p), 'concat' (head on concatenation) or 'hnl'."""
        if self is Variant.P:
            return "plain"
        if self in (Variant.P_B, Variant.P_K, Variant.P_B_K):
            return "concat"
        return "hnl"

    @property
    def uses_edge(self) -> bool:
        return "b" in self.factors

    @property
    def uses_pose(self) -> bool:
        return "k" in self.factors


_FACTORS = {
    Variant.P: ("p",),
    Variant.PP: ("p",),
    Variant.P_B: ("p", "b"),
    Variant.P_K: ("p", "k"),
    Variant.P_B_K: ("p", "b", "k"),
    Variant.PB: ("p", "b"),
    Variant.PK: ("p", "k"),
    Variant.PBB: ("p", "b", "b"),
    Variant.PKK: ("p", "k", "k"),
    Variant.CORRPM: ("p", "b", "k"),
}


@dataclass(frozen=True)
class ModelConfig:
    q: int = 7
    j: int = 5
    feature_width: int = 64
    backbone_widths: tuple[int, ...] = (16, 32, 64, 64, 64)
    aspp_rates: tuple[int, ...] = (1, 2, 4, 6)
    in_channels: int = 3

    def __post_init__(self):
        if len(self.backbone_widths) != 5:
            raise ConfigurationError("backbone_widths needs five stage widths")
        if len(self.aspp_rates) < 1:
            raise ConfigurationError("ASPP needs at least its 1x1 branch")


# ---------------------------------------------------------------- parameters


def _param_shapes(cfg: ModelConfig, variant: Variant) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, kind) for every parameter the variant needs."""
    c = cfg.feature_width
    w = cfg.backbone_widths
    specs: list[tuple[str, tuple[int, ...], str]] = []

    def conv(name, c_out, c_in, k, kind="weight"):
        specs.append((f"{name}.weight", (c_out, c_in, k, k), kind))
        specs.append((f"{name}.bias", (c_out,), "bias"))

    prev = cfg.in_channels
    for s, width in enumerate(w, start=1):
        conv(f"backbone.stage{s}.conv1", width, prev, 3)
        conv(f"backbone.stage{s}.conv2", width, width, 3)
        prev = width

    for i, rate in enumerate(cfg.aspp_rates):
        conv(f"parsing.aspp.branch{i}", c, w[4], 1 if i == 0 else 3)
    conv("parsing.aspp.project", c, c * len(cfg.aspp_rates), 1)
    conv("parsing.skip", c, w[1], 1)
    conv("parsing.fuse", c, 2 * c, 1)
    conv("parsing.aux_head", cfg.q, c, 1, kind="head")

    if variant.uses_edge:
        conv("edge.fuse", c, w[1] + w[2] + w[3], 1)
        conv("edge.head", 2, c, 1, kind="head")
    if variant.uses_pose:
        specs.append(("pose.deconv1.weight", (w[4], c, 4, 4), "tweight"))
        specs.append(("pose.deconv1.bias", (c,), "bias"))
        specs.append(("pose.deconv2.weight", (c, c, 4, 4), "tweight"))
        specs.append(("pose.deconv2.bias", (c,), "bias"))
        conv("pose.head", cfg.j, c, 1, kind="head")

    n_factors = len(variant.factors)
    if variant.mode == "hnl":
        specs.extend(hnl_param_shapes(c, n_factors))
        conv("head", cfg.q, c, 1, kind="head")
    elif variant.mode == "concat":
        conv("head", cfg.q, n_factors * c, 1, kind="head")
    else:
        conv("head", cfg.q, c, 1, kind="head")
    return specs


def hnl_param_shapes(c: int, n_factors: int) -> list[tuple[str, tuple[int, ...], str]]:
    specs = []
    for name, c_in, kind in (
        ("hnl.hybrid", n_factors * c, "weight"),
        ("hnl.query", c, "weight"),
        ("hnl.key_projection", c, "weight"),
        ("hnl.value", c, "weight"),
        ("hnl.out", c, "zero"),
    ):
        specs.append((f"{name}.weight", (c, c_in, 1, 1), kind))
        specs.append((f"{name}.bias", (c,), "bias"))
    return specs


def _init_value(name: str, shape: tuple[int, ...], kind: str, seed: int) -> np.ndarray:
    if kind in ("bias", "zero"):
        return np.zeros(shape)
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    if kind == "tweight":
        c_in, _, k, _ = shape
        fan_in = c_in * k * k / 4.0  # stride-2 layers: each output sees (k/2)^2 taps per channel
    else:
        fan_in = int(np.prod(shape[1:]))
    gain = 6.0 if kind in ("weight", "tweight") else 1.0
    bound = np.sqrt(gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, variant, seed: int) -> ParamStore:
    """Fan-in scaled uniform weights, zero biases, zero HNL output transform."""
    variant = Variant.parse(variant)
    params = ParamStore()
    for name, shape, kind in _param_shapes(cfg, variant):
        params.add(name, _init_value(name, shape, kind, seed))
    return params


# ---------------------------------------------------------------- layers


def _conv(x, params: ParamStore, name: str, stride=1, pad=0, dilation=1, act=False) -> Tensor:
    y = ops.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride, pad, dilation)
    return ops.relu(y) if act else y


def _batched(x) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 3:
        return ops.reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got {x.shape}")


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return ops.reshape(x, x.shape[1:]) if squeeze else x


@dataclass
class BackboneStages:
    stage2: Tensor
    stage3: Tensor
    stage4: Tensor
    stage5: Tensor


def backbone_forward(image, params: ParamStore) -> BackboneStages:
    """Five conv stages; strides 2,4,8,16 then a dilated stage at stride 16."""
    x, _ = _batched(image)
    h, w = x.shape[-2:]
    if h % 16 or w % 16:
        raise ShapeError(f"backbone: input size {h}x{w} must be a multiple of 16")
    feats = []
    for s in range(1, 6):
        stride, dil = (2, 1) if s <= 4 else (1, 2)
        x = _conv(x, params, f"backbone.stage{s}.conv1", stride=stride, pad=dil, dilation=dil, act=True)
        x = _conv(x, params, f"backbone.stage{s}.conv2", pad=dil, dilation=dil, act=True)
        feats.append(x)
    return BackboneStages(stage2=feats[1], stage3=feats[2], stage4=feats[3], stage5=feats[4])


def parsing_encoder(stages: BackboneStages, params: ParamStore, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """ASPP on the deepest stage, upsampled and merged with the stride-4 stage."""
    x = stages.stage5
    branches = []
    for i, rate in enumerate(cfg.aspp_rates):
        if i == 0:
            branches.append(_conv(x, params, "parsing.aspp.branch0", act=True))
        else:
            branches.append(_conv(x, params, f"parsing.aspp.branch{i}", pad=rate, dilation=rate, act=True))
    aspp = _conv(ops.concat_channels(branches), params, "parsing.aspp.project", act=True)
    h, w = stages.stage2.shape[-2:]
    aspp = ops.bilinear_upsample(aspp, h, w)
    skip = _conv(stages.stage2, params, "parsing.skip", act=True)
    f_p = _conv(ops.concat_channels([aspp, skip]), params, "parsing.fuse", act=True)
    return f_p, _conv(f_p, params, "parsing.aux_head")


def edge_encoder(stages: BackboneStages, params: ParamStore) -> tuple[Tensor, Tensor]:
    h, w = stages.stage2.shape[-2:]
    s3 = ops.bilinear_upsample(stages.stage3, h, w)
    s4 = ops.bilinear_upsample(stages.stage4, h, w)
    f_b = _conv(ops.concat_channels([stages.stage2, s3, s4]), params, "edge.fuse", act=True)
    return f_b, _conv(f_b, params, "edge.head")


def pose_encoder(stages: BackboneStages, params: ParamStore) -> tuple[Tensor, Tensor]:
    """Two stride-2 transposed convolutions bring the deepest stage up 4x."""
    x = stages.stage5
    for name in ("pose.deconv1", "pose.deconv2"):
        x = ops.relu(ops.transposed_conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=2, pad=1))
    if x.shape[-2:] != stages.stage2.shape[-2:]:
        raise ShapeError(f"pose encoder: output {x.shape[-2:]} does not match parsing scale {stages.stage2.shape[-2:]}")
    return x, _conv(x, params, "pose.head")


class HNLOutput(NamedTuple):
    f_p2: Tensor
    relation: Tensor
    hybrid: Tensor


def hnl_block(factors: list[Tensor], f_p: Tensor, params: ParamStore) -> HNLOutput:
    """Correlate a hybrid of ``factors`` with the parsing feature and fuse residually.

    hybrid = W_a(concat(factors)); S = softmax_rows(A @ B) with A from the
    hybrid (N x C) and B from f_p (C x N); f_p2 = W_b(S @ V(f_p)) + f_p.
    """
    f_p, squeeze = _batched(f_p)
    factors = [_batched(f)[0] for f in factors]
    b, c, h, w = f_p.shape
    n = h * w
    for f in factors:
        if f.shape != f_p.shape:
            raise ShapeError(f"hnl: factor shape {f.shape} differs from parsing feature {f_p.shape}")
    hybrid = _conv(ops.concat_channels(factors), params, "hnl.hybrid")
    a = ops.transpose(ops.reshape(_conv(hybrid, params, "hnl.query"), (b, c, n)), (0, 2, 1))
    key = ops.reshape(_conv(f_p, params, "hnl.key_projection"), (b, c, n))
    relation = ops.softmax_rows(ops.matmul(a, key, label="correlation"))
    value = ops.transpose(ops.reshape(_conv(f_p, params, "hnl.value"), (b, c, n)), (0, 2, 1))
    agg = ops.matmul(relation, value, label="aggregation")
    agg = ops.reshape(ops.transpose(agg, (0, 2, 1)), (b, c, h, w))
    f_p2 = ops.add(_conv(agg, params, "hnl.out"), f_p)
    if squeeze:
        return HNLOutput(_unbatch(f_p2, True), _unbatch(relation, True), _unbatch(hybrid, True))
    return HNLOutput(f_p2, relation, hybrid)


@dataclass
class FusionOutput:
    parse_logits: Tensor
    f_p2: Tensor | None
    relation: Tensor | None


def _select_factors(variant: Variant, f_p, f_b, f_k) -> list[Tensor]:
    lookup = {"p": f_p, "b": f_b, "k": f_k}
    out = []
    for tag in variant.factors:
        if lookup[tag] is None:
            missing = {"b": "edge", "k": "pose"}[tag]
            raise ConfigurationError(f"variant {variant.value} needs the {missing} feature, which is absent")
        out.append(lookup[tag])
    return out


def hnl_forward(f_p, f_b, f_k, params: ParamStore, variant) -> FusionOutput:
    """Fuse encoder features per ``variant`` and classify the result."""
    variant = Variant.parse(variant)
    factors = _select_factors(variant, f_p, f_b, f_k)
    if variant.mode == "plain":
        return FusionOutput(_conv(f_p, params, "head"), None, None)
    if variant.mode == "concat":
        return FusionOutput(_conv(ops.concat_channels(factors), params, "head"), None, None)
    out = hnl_block(factors, f_p, params)
    return FusionOutput(_conv(out.f_p2, params, "head"), out.f_p2, out.relation)


@dataclass
class ModelOutput:
    parse_logits: Tensor
    parse_logits_aux: Tensor
    edge_logits: Tensor | None
    pose_heatmaps: Tensor | None
    relation: Tensor | None
    f_p: Tensor
    f_b: Tensor | None
    f_k: Tensor | None
    f_p2: Tensor | None


def model_forward(image, params: ParamStore, cfg: ModelConfig, variant) -> ModelOutput:
    variant = Variant.parse(variant)
    stages = backbone_forward(image, params)
    f_p, aux = parsing_encoder(stages, params, cfg)
    f_b = edge_logits = f_k = heatmaps = None
    if variant.uses_edge:
        f_b, edge_logits = edge_encoder(stages, params)
    if variant.uses_pose:
        f_k, heatmaps = pose_encoder(stages, params)
    fused = hnl_forward(f_p, f_b, f_k, params, variant)
    return ModelOutput(
        parse_logits=fused.parse_logits,
        parse_logits_aux=aux,
        edge_logits=edge_logits,
        pose_heatmaps=heatmaps,
        relation=fused.relation,
        f_p=f_p,
        f_b=f_b,
        f_k=f_k,
        f_p2=fused.f_p2,
    )


# ---------------------------------------------------------------- fusion cost


class FusionCost(NamedTuple):
    hnl_macs: int
    pairwise_macs: int
    hnl_correlations: int
    pairwise_correlations: int


def _pairwise_fusion(factors: list[Tensor], params: ParamStore) -> Tensor:
    """Non-local correlation computed separately for every unordered factor pair."""
    b, c, h, w = factors[0].shape
    n = h * w
    out = factors[0]
    for i in range(len(factors)):
        for j in range(i + 1, len(factors)):
            a = ops.transpose(ops.reshape(_conv(factors[i], params, "hnl.query"), (b, c, n)), (0, 2, 1))
            key = ops.reshape(_conv(factors[j], params, "hnl.key_projection"), (b, c, n))
            relation = ops.softmax_rows(ops.matmul(a, key, label="correlation"))
            value = ops.transpose(ops.reshape(_conv(factors[j], params, "hnl.value"), (b, c, n)), (0, 2, 1))
            agg = ops.reshape(ops.transpose(ops.matmul(relation, value, label="aggregation"), (0, 2, 1)), (b, c, h, w))
            out = ops.add(out, _conv(agg, params, "hnl.out"))
    return out


def count_fusion_macs(k: int, c: int, h: int, w: int, seed: int = 0) -> FusionCost:
    """Measure MACs of one HNL pass versus pairwise correlation over ``k`` factor maps."""
    if k < 1:
        raise ValueError("need at least one factor map")
    rng = np.random.default_rng(seed)
    factors = [Tensor(rng.standard_normal((1, c, h, w))) for _ in range(k)]
    params = ParamStore()
    for name, shape, kind in hnl_param_shapes(c, k):
        params.add(name, _init_value(name, shape, kind, seed))

    with OpCounter() as hnl_counter:
        hnl_block(factors, factors[0], params)
    with OpCounter() as pair_counter:
        _pairwise_fusion(factors, params)
    return FusionCost(
        hnl_macs=hnl_counter.total,
        pairwise_macs=pair_counter.total,
        hnl_correlations=hnl_counter.calls["correlation"],
        pairwise_correlations=pair_counter.calls["correlation"],
    )
