"""Few-shot image generation with texture/structure fusion and multi-scale
feature equalization."""

__version__ = "0.1.0"

from .config import RunConfig, parse_config, serialize_config
from .data import (
    Dataset,
    DatasetSpec,
    ImageBatch,
    classification_splits,
    load_dataset,
    make_synthetic_dataset,
    sample_task,
    split_unseen,
    synthetic_spec,
)
from .discriminator import Discriminator
from .fusion import (
    BranchFeatures,
    EqualizedFeatures,
    FeatureFusion,
    FeaturePyramid,
    FusionPlan,
    local_fuse,
    sample_plan,
    similarity_map,
)
from .generator import FusionGenerator, GeneratorConfig, GeneratorOutput, decoder_intermediate
from .losses import (
    LossWeights,
    classification_loss,
    consistent_equalization_loss,
    hinge_d_loss,
    hinge_g_loss,
    local_reconstruction_loss,
    total_d_loss,
    total_g_loss,
)
from .trainer import Trainer, load_checkpoint, lr_at, train
from .evaluation import (
    augment_classification,
    dump_feature_maps,
    eval_generation,
    fid,
    lpips_diversity,
    shot_sweep,
)

__all__ = [
    "__version__",
    "RunConfig",
    "parse_config",
    "serialize_config",
    "Dataset",
    "DatasetSpec",
    "ImageBatch",
    "classification_splits",
    "load_dataset",
    "make_synthetic_dataset",
    "sample_task",
    "split_unseen",
    "synthetic_spec",
    "Discriminator",
    "BranchFeatures",
    "EqualizedFeatures",
    "FeatureFusion",
    "FeaturePyramid",
    "FusionPlan",
    "local_fuse",
    "sample_plan",
    "similarity_map",
    "FusionGenerator",
    "GeneratorConfig",
    "GeneratorOutput",
    "decoder_intermediate",
    "LossWeights",
    "classification_loss",
    "consistent_equalization_loss",
    "hinge_d_loss",
    "hinge_g_loss",
    "local_reconstruction_loss",
    "total_d_loss",
    "total_g_loss",
    "Trainer",
    "load_checkpoint",
    "lr_at",
    "train",
    "augment_classification",
    "dump_feature_maps",
    "eval_generation",
    "fid",
    "lpips_diversity",
    "shot_sweep",
]
