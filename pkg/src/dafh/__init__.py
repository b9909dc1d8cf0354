"""Learned group partitions with decoupled classifiers, trained for fairness without harm."""

from .data import Dataset, SplitSpec, gen_synthetic, load_csv, split, standardize
from .errors import DafhError, DataError, EmptyGroupError, InvalidArgument, NumericFailure
from .models import TrainedSystem, load_system, save_system
from .training import TrainConfig, train_dafh, train_pooled

__all__ = [
    "DafhError", "DataError", "Dataset", "EmptyGroupError", "InvalidArgument", "NumericFailure",
    "SplitSpec", "TrainConfig", "TrainedSystem", "gen_synthetic", "load_csv", "load_system",
    "save_system", "split", "standardize", "train_dafh", "train_pooled",
]
