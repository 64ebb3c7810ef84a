"""Composition-based egocentric action recognition over hand-object tracklets."""
from .config import ConfigError, RunConfig, load_config
from .data import ActionDescription, ValidationError, VideoSample
from .estimator import FFCNClassifier
from .model import FFCN, Batch
from .training import MetricsRecord, Trainer, evaluate_batch, fewshot_finetune, load_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ActionDescription", "Batch", "ConfigError", "FFCN", "FFCNClassifier", "MetricsRecord", "RunConfig",
    "Trainer", "ValidationError", "VideoSample", "evaluate_batch", "fewshot_finetune", "load_checkpoint",
    "load_config", "train",
]
