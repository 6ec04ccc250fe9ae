"""Unified prompt and cross-attention adapter tuning for dual-encoder vision-language models."""

from .config import AdapterConfig, ModelConfig, RunConfig, TrainConfig
from .losses import BranchEmbeddings, LossReport, co2_loss, consistency_kl, info_nce, itc_loss, total_loss
from .model import PromptedDualEncoder, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "BranchEmbeddings",
    "LossReport",
    "ModelConfig",
    "PromptedDualEncoder",
    "RunConfig",
    "TrainConfig",
    "co2_loss",
    "consistency_kl",
    "info_nce",
    "itc_loss",
    "load_checkpoint",
    "save_checkpoint",
    "total_loss",
]
