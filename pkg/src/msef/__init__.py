"""Frozen-LLM time-series forecasting with per-layer steering prefixes."""

from .backbone import BackboneConfig, BackboneWeights, forward_with_injection, init_backbone
from .fusion import FusionConfig, MSEFModel, build_model, trainable_parameters
from .tsfm import TsfmConfig, TsfmWeights, encode, init_tsfm, pretrain_masked

__all__ = [
    "BackboneConfig",
    "BackboneWeights",
    "FusionConfig",
    "MSEFModel",
    "TsfmConfig",
    "TsfmWeights",
    "build_model",
    "encode",
    "forward_with_injection",
    "init_backbone",
    "init_tsfm",
    "pretrain_masked",
    "trainable_parameters",
]
