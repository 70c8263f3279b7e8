"""Semantic change detection with a temporal-invariant historical map (triplet network)."""

from .net import DiffOp, FusionOp, ModelConfig, SegmentationNetwork, TripletNetwork, TripletOutput
from .tensor import Parameter, Tensor

__all__ = [
    "DiffOp",
    "FusionOp",
    "ModelConfig",
    "Parameter",
    "SegmentationNetwork",
    "Tensor",
    "TripletNetwork",
    "TripletOutput",
]
__version__ = "0.1.0"
