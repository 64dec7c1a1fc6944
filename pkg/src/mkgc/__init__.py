"""Hybrid text/vision transformer with multi-level fusion for multimodal
knowledge-graph completion, relation extraction and entity tagging."""

from .encoders import ModelConfig
from .model import HybridTransformer

__all__ = ["ModelConfig", "HybridTransformer"]
__version__ = "0.1.0"
