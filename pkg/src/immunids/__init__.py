"""Layered intrusion detection: surface barrier, innate DTW detectors and an
adaptive PCA + decision-tree analyzer, with knowledge sync between instances."""

from .config import SystemConfig, build_config
from .errors import IDSError
from .pipeline import TrainedSystem, detect, feedback, load_system, save_system, train
from .traffic import FlowRecord, Label, LabeledDataset, load_dataset

__all__ = [
    "FlowRecord", "IDSError", "Label", "LabeledDataset", "SystemConfig", "TrainedSystem",
    "build_config", "detect", "feedback", "load_dataset", "load_system", "save_system", "train",
]
__version__ = "0.1.0"
