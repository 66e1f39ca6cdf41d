"""Contextual vision-language alignment classifier for semantic location prediction."""
from .datagen import Dataset, DatasetSpec, MultimodalPost, generate_dataset
from .evaluation import ablation_suite, evaluate, robustness_sweep
from .model import Dims, ModelParams, build_model, forward
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "DatasetSpec", "Dims", "ModelParams", "MultimodalPost", "TrainConfig",
    "ablation_suite", "build_model", "evaluate", "forward", "generate_dataset",
    "robustness_sweep", "train",
]
