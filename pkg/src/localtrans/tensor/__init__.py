from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .core import (
    NumericalError,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    concat,
    get_default_dtype,
    set_default_dtype,
)
from .ops import batchnorm, conv1x1, conv2d, global_avgpool, maxpool2x2, relu, resize_bicubic

__all__ = [
    "CheckpointError",
    "NumericalError",
    "Parameter",
    "ShapeError",
    "Tensor",
    "backward",
    "batchnorm",
    "concat",
    "conv1x1",
    "conv2d",
    "get_default_dtype",
    "global_avgpool",
    "load_checkpoint",
    "maxpool2x2",
    "relu",
    "resize_bicubic",
    "save_checkpoint",
    "set_default_dtype",
]
