"""Multi-factor human parsing on a small numpy autodiff core.

Parsing, edge and pose features are fused by one heterogeneous non-local
block. The package also ships a stick-figure data generator and a training
and ablation harness.
"""

from corrpm.gradcheck import GradcheckReport, NondeterminismError, gradcheck
from corrpm.harness import (
    AblationTable,
    RunRecord,
    TrainConfig,
    TrainingError,
    ablate,
    benchmark_config,
    load_model,
    poly_lr,
    sgd_step,
    train,
)
from corrpm.model import ConfigurationError, ModelConfig, Variant, count_fusion_macs, init_params, model_forward
from corrpm.supervision import Keypoint, LossWeights, MetricsReport, derive_edges, evaluate, render_heatmaps, total_loss
from corrpm.synthdata import DatasetError, GeneratorConfig, SampleRecord, generate, read_dataset, write_dataset
from corrpm.tensor import OpCounter, ParamStore, ShapeError, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "AblationTable", "ConfigurationError", "DatasetError", "GeneratorConfig", "GradcheckReport", "Keypoint",
    "LossWeights", "MetricsReport", "ModelConfig", "NondeterminismError", "OpCounter", "ParamStore", "RunRecord",
    "SampleRecord", "ShapeError", "Tensor", "TrainConfig", "TrainingError", "Variant", "ablate", "backward",
    "benchmark_config", "count_fusion_macs", "derive_edges", "evaluate", "generate", "gradcheck", "init_params",
    "load_model", "model_forward", "poly_lr", "read_dataset", "render_heatmaps", "sgd_step", "total_loss", "train",
    "write_dataset",
]
