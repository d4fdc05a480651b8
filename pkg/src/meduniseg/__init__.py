"""Prompt-driven universal segmentation across tasks and modalities.

A single 3D UNet serves 2D and 3D inputs of 1-4 channels. A learnable
modal prompt is mapped into an additive input prior, and a universal task
prompt is fused with the bottleneck features to give a task-specific prior
for the decoder.
"""
from .backbone import ModelConfig, PromptConfig
from .network import MedUniSegNet, build_model
from .registry import Registry, build_registry
from .trainer import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "MedUniSegNet",
    "ModelConfig",
    "PromptConfig",
    "Registry",
    "TrainConfig",
    "build_model",
    "build_registry",
]
