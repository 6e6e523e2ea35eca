"""Ordinal image regression with controllable boundary-sample generation."""

from .backbone import BackboneConfig, EncoderClassifier, FeaturePyramid
from .datasets import (
    OrdinalDataset,
    OrdinalSample,
    SyntheticSpec,
    build_synthetic_dataset,
    load_folder_dataset,
    save_folder_dataset,
    split_folds,
)
from .estimator import OrdinalFusionClassifier
from .evaluation import (
    PerCategoryReport,
    PredictionRecord,
    accuracy,
    cross_validated_eval,
    identify_minorities,
    mae,
    per_category_metrics,
)
from .generator import (
    ChannelSplit,
    FeatureSeparator,
    SeparatedFeatures,
    direct_add_fusion,
    fuse,
    split_channels,
)
from .losses import (
    LossBundle,
    LossWeights,
    SsimParams,
    categorical_generation_loss,
    classification_loss,
    cross_entropy,
    generation_loss,
    reconstruction_loss,
    ssim,
    structural_generation_loss,
)
from .sampling import (
    AdjacencyProbabilities,
    NoReferenceAvailable,
    adjacency_probabilities,
    sample_reference,
)
from .training import (
    TrainConfig,
    Trainer,
    apply_ablation,
    load_checkpoint,
    run_training,
)

__version__ = "0.1.0"

__all__ = [
    "AdjacencyProbabilities",
    "BackboneConfig",
    "ChannelSplit",
    "EncoderClassifier",
    "FeaturePyramid",
    "FeatureSeparator",
    "LossBundle",
    "LossWeights",
    "NoReferenceAvailable",
    "OrdinalDataset",
    "OrdinalFusionClassifier",
    "OrdinalSample",
    "PerCategoryReport",
    "PredictionRecord",
    "SeparatedFeatures",
    "SsimParams",
    "SyntheticSpec",
    "TrainConfig",
    "Trainer",
    "accuracy",
    "adjacency_probabilities",
    "apply_ablation",
    "build_synthetic_dataset",
    "categorical_generation_loss",
    "classification_loss",
    "cross_entropy",
    "cross_validated_eval",
    "direct_add_fusion",
    "fuse",
    "generation_loss",
    "identify_minorities",
    "load_checkpoint",
    "load_folder_dataset",
    "mae",
    "per_category_metrics",
    "reconstruction_loss",
    "run_training",
    "sample_reference",
    "save_folder_dataset",
    "split_channels",
    "split_folds",
    "ssim",
    "structural_generation_loss",
]
