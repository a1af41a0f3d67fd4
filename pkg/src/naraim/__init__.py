"""Autoregressive next-patch pre-training of a small ViT on native-aspect-ratio images."""
from .config import BackboneConfig, RunConfig, TrainConfig, preset
from .imaging import PipelineConfig
from .model import Model

__version__ = "0.1.0"

__all__ = ["BackboneConfig", "Model", "PipelineConfig", "RunConfig", "TrainConfig", "preset"]
