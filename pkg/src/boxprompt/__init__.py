"""Box-supervised prompt-embedding learning for frozen segmentation backbones.

A small trainable module maps a frozen backbone's image embedding to the
prompt embeddings its mask decoder consumes, so the backbone segments a
target region automatically.  Training needs only tight bounding boxes,
enforced through differentiable emptiness, tightness, and size
constraints, and works in the few-shot regime.
"""

from .backbone import (
    BackboneShapeSpec,
    ImageEmbedding,
    MedSamBackbone,
    ToyBackbone,
    TOY_SPEC,
    MEDSAM_VITB_SPEC,
)
from .estimator import PromptSegmenter, default_prompt_config
from .evaluation import MetricsReport, aggregate_runs, binarize, dice, evaluate
from .geometry import (
    Band,
    RegionPartition,
    SegmentSet,
    TightBox,
    build_segments,
    map_box_to_grid,
    partition_regions,
    tight_box_from_mask,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    PenaltyConfig,
    SizePrior,
    emptiness_loss,
    penalty,
    size_loss,
    tightness_loss,
    total_loss,
)
from .promptnet import (
    PromptEmbedding,
    PromptModule,
    PromptModuleConfig,
    init_prompt_module,
    load_prompt_module,
    medsam_prompt_config,
    parameter_count,
    save_prompt_module,
)
from .train import TrainConfig, lr_at, repeated_experiment, train

__version__ = "0.1.0"

__all__ = [
    "BackboneShapeSpec",
    "Band",
    "ImageEmbedding",
    "LossBreakdown",
    "LossWeights",
    "MedSamBackbone",
    "MetricsReport",
    "MEDSAM_VITB_SPEC",
    "PenaltyConfig",
    "PromptEmbedding",
    "PromptModule",
    "PromptModuleConfig",
    "PromptSegmenter",
    "RegionPartition",
    "SegmentSet",
    "SizePrior",
    "TightBox",
    "TOY_SPEC",
    "ToyBackbone",
    "TrainConfig",
    "aggregate_runs",
    "binarize",
    "build_segments",
    "default_prompt_config",
    "dice",
    "emptiness_loss",
    "evaluate",
    "init_prompt_module",
    "load_prompt_module",
    "lr_at",
    "map_box_to_grid",
    "medsam_prompt_config",
    "parameter_count",
    "partition_regions",
    "penalty",
    "repeated_experiment",
    "save_prompt_module",
    "size_loss",
    "tight_box_from_mask",
    "tightness_loss",
    "total_loss",
    "train",
    "__version__",
]
