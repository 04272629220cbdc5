"""Dual-bridging recommender: collaborative filtering with latent group discovery."""

from .data import InteractionDataset, prepare
from .evaluation import MetricReport, RankResult, compute_metrics, evaluate
from .model import DBRec, HyperParams, ModelParams, TrainBatch, VARIANTS, VariantMask
from .training import TrainConfig, load_checkpoint, pretrain, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "DBRec",
    "HyperParams",
    "InteractionDataset",
    "MetricReport",
    "ModelParams",
    "RankResult",
    "TrainBatch",
    "TrainConfig",
    "VARIANTS",
    "VariantMask",
    "compute_metrics",
    "evaluate",
    "load_checkpoint",
    "prepare",
    "pretrain",
    "save_checkpoint",
    "train",
]
