"""Parametrized value-function families and the induced feedback law."""

from .activation import ACTIVATIONS, SIN_PLUS_COS, SinPlusCos
from .base import (ModelEval, ModelNodeCache, ValueModel, feedback,
                   feedback_dy, feedback_full, load_theta, save_theta)
from .partition import PartitionPolyModel, build_partition, taylor_init
from .resnet import ResidualNetModel, resnet_param_count

__all__ = [
    "ACTIVATIONS", "SIN_PLUS_COS", "SinPlusCos",
    "ModelEval", "ModelNodeCache", "ValueModel",
    "feedback", "feedback_dy", "feedback_full", "load_theta", "save_theta",
    "PartitionPolyModel", "build_partition", "taylor_init",
    "ResidualNetModel", "resnet_param_count",
]
