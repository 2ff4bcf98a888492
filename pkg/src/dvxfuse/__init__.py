"""Dual-view X-ray classification: frequency-domain interaction, cross-view attention
and attention-based fusion on a shared-weight backbone, built on a small numpy
autodiff core."""

from .model import ABLATION_ROWS, ModelConfig, build_model, count_params_flops, forward_pair
from .tensor import ComplexGrid, ConvSpec, DimensionError, PoolKind, Tensor

__version__ = "0.1.0"

__all__ = ["ABLATION_ROWS", "ComplexGrid", "ConvSpec", "DimensionError", "ModelConfig", "PoolKind",
           "Tensor", "build_model", "count_params_flops", "forward_pair"]
