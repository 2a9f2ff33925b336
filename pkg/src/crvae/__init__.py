"""Contrastive-regularized variational autoencoder and posterior-collapse diagnostics."""

from .checkpoint import load_checkpoint, save_checkpoint
from .contrastive import cr_loss, ema_update, info_nce, mi_lower_bound
from .data import AugmentationSpec, Dataset, load_dataset
from .estimator import CRVAE
from .exceptions import (
    CheckpointError,
    ConfigurationError,
    DataFormatError,
    TrainingDivergedError,
)
from .metrics import MetricRecord, evaluate, export_latents, read_latents
from .model import Architecture
from .probes import CosineKNNClassifier, LinearProbe, knn_classify, linear_probe
from .runner import TrainConfig, ablate_gamma, train
from .tsne import ExactTSNE, tsne_2d

__version__ = "0.1.0"

__all__ = [
    "AugmentationSpec", "Architecture", "CRVAE", "CheckpointError", "ConfigurationError",
    "CosineKNNClassifier", "DataFormatError", "Dataset", "ExactTSNE", "LinearProbe",
    "MetricRecord", "TrainConfig", "TrainingDivergedError", "ablate_gamma", "cr_loss",
    "ema_update", "evaluate", "export_latents", "info_nce", "knn_classify", "linear_probe",
    "load_checkpoint", "load_dataset", "mi_lower_bound", "read_latents", "save_checkpoint",
    "train", "tsne_2d",
]
