"""Two-level attention-based random forests for tabular regression."""

from larf.attention import AttentionFeatures, KernelParams, compute_features
from larf.data import Dataset, GeneratorSpec, SplitSpec, generate, load_csv, split
from larf.forest import Forest, ForestConfig, fit_forest
from larf.models import ModelVariant, TrainedModel, fit_model, predict

__version__ = "0.1.0"

__all__ = [
    "AttentionFeatures",
    "Dataset",
    "Forest",
    "ForestConfig",
    "GeneratorSpec",
    "KernelParams",
    "ModelVariant",
    "SplitSpec",
    "TrainedModel",
    "compute_features",
    "fit_forest",
    "fit_model",
    "generate",
    "load_csv",
    "predict",
    "split",
]
