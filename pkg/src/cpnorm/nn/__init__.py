"""Layers, reparametrizations and models with hand-derived gradients."""

from .functional import ShapeError
from .layers import Conv2d, CpNormWeight, DenseWeight, Dropout, Flatten, Linear, MaxPool2d, ReLU, WeightNormWeight
from .model import (
    ALEXNET_RANKS,
    INPUT_SHAPES,
    LENET_RANKS,
    LayerSpec,
    Model,
    architecture_specs,
    build_architecture,
    build_model,
    check_input,
    param_count,
    spec_param_count,
    table_shape,
)
from .reparam import (
    CpNormGrads,
    CpNormParam,
    WeightNormParam,
    cpnorm_backward,
    cpnorm_weight,
    weightnorm_backward,
    weightnorm_weight,
)

__all__ = [
    "ShapeError", "Conv2d", "CpNormWeight", "DenseWeight", "Dropout", "Flatten", "Linear", "MaxPool2d", "ReLU",
    "WeightNormWeight", "ALEXNET_RANKS", "INPUT_SHAPES", "LENET_RANKS", "LayerSpec", "Model", "architecture_specs",
    "build_architecture", "build_model", "check_input", "param_count", "spec_param_count", "table_shape",
    "CpNormGrads", "CpNormParam", "WeightNormParam", "cpnorm_backward", "cpnorm_weight", "weightnorm_backward",
    "weightnorm_weight",
]
