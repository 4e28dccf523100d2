"""Desk-scale simulator for federated fine-tuning through a compressed proxy sub-model."""

from .config import ExperimentConfig, load_config
from .subfm import CompressionSpec, compress_model, cost_report, plug_in_sync
from .transformer import ModelConfig, TransformerModel, count_parameters, forward, init_lora, init_model

__all__ = [
    "CompressionSpec",
    "ExperimentConfig",
    "ModelConfig",
    "TransformerModel",
    "compress_model",
    "cost_report",
    "count_parameters",
    "forward",
    "init_lora",
    "init_model",
    "load_config",
    "plug_in_sync",
]
