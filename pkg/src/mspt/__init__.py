"""Multi-scale prototypical transformer for multiple-instance bag classification."""

from .autodiff import AdamState, Tape, Tensor, adam_step, backward
from .clustering import KMeansConfig, PrototypeBag, extract_prototypes, kmeans_fit
from .data import Dataset, MultiScaleBag, SyntheticConfig, generate_synthetic, load_dataset, save_dataset
from .models import BagInput, Model, ModelConfig
from .training import TrainConfig, evaluate, run_kfold, train

__version__ = "0.1.0"

__all__ = [
    "AdamState", "Tape", "Tensor", "adam_step", "backward",
    "KMeansConfig", "PrototypeBag", "extract_prototypes", "kmeans_fit",
    "Dataset", "MultiScaleBag", "SyntheticConfig", "generate_synthetic", "load_dataset", "save_dataset",
    "BagInput", "Model", "ModelConfig",
    "TrainConfig", "evaluate", "run_kfold", "train",
]
