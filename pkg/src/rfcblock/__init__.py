"""Region feature completion for occluded sequence re-identification.

A numpy-backed reverse-mode engine, the completion block (adaptive
partition, spatial and temporal completion, reverse projection), its
training objective, a synthetic occluded benchmark and retrieval metrics.
"""

from .block import BlockConfig, RfcBlockParams, rfc_block_forward
from .errors import (
    DimensionError,
    EvaluationError,
    MiningError,
    NumericError,
    RFCError,
    RFCTFormatError,
    ValidationError,
)
from .evaluation import EvalResult, GallerySet, evaluate
from .losses import LossReport, LossWeights, total_loss
from .network import ModelConfig, RFCNet
from .tensor import Parameter, Tensor

__version__ = "0.1.0"

__all__ = [
    "BlockConfig", "RfcBlockParams", "rfc_block_forward",
    "DimensionError", "EvaluationError", "MiningError", "NumericError", "RFCError",
    "RFCTFormatError", "ValidationError",
    "EvalResult", "GallerySet", "evaluate",
    "LossReport", "LossWeights", "total_loss",
    "ModelConfig", "RFCNet", "Parameter", "Tensor",
]
