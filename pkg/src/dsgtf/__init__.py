"""Dual-stream graph-attention / transformer fusion decoder for multichannel recordings."""

from .data import LABELS, DatasetSplit, Recording, SyntheticConfig, load_manifest, synthesize_dataset
from .model import ModelConfig, forward, init_params, param_count, predict_labels
from .sensor_graph import AdjacencyMatrix, SensorLayout, build_adjacency
from .training import TrainConfig, evaluate, load_checkpoint, save_checkpoint, sweep_adjacency, train

__version__ = "0.1.0"

__all__ = [
    "LABELS", "DatasetSplit", "Recording", "SyntheticConfig", "load_manifest", "synthesize_dataset",
    "ModelConfig", "forward", "init_params", "param_count", "predict_labels",
    "AdjacencyMatrix", "SensorLayout", "build_adjacency",
    "TrainConfig", "evaluate", "load_checkpoint", "save_checkpoint", "sweep_adjacency", "train",
]
