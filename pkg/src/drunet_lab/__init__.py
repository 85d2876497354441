"""drunet-lab: a desk-scale segmentation network laboratory.

Implements a dense-residual hybrid block alongside plain, residual and dense
baselines inside a 5-level encoder-decoder network, on top of a from-scratch
numpy autodiff engine, with a deterministic training harness, segmentation
metrics and paired significance testing.
"""

from .tensor import (
    Tensor,
    ConvParams,
    BatchNormParams,
    conv_params,
    batch_norm_params,
    conv2d,
    batch_norm,
    relu,
    max_pool_2x2,
    up_conv_2x2,
    concat_channels,
    add,
    mul,
    tensor_sum,
    softmax,
    softmax_cross_entropy,
    finite_diff_check,
    GradCheckReport,
)
from .errors import (
    DrunetError,
    ConfigurationError,
    DataError,
    IncompatibilityError,
    InternalError,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "ConvParams",
    "BatchNormParams",
    "conv_params",
    "batch_norm_params",
    "conv2d",
    "batch_norm",
    "relu",
    "max_pool_2x2",
    "up_conv_2x2",
    "concat_channels",
    "add",
    "mul",
    "tensor_sum",
    "softmax",
    "softmax_cross_entropy",
    "finite_diff_check",
    "GradCheckReport",
    "DrunetError",
    "ConfigurationError",
    "DataError",
    "IncompatibilityError",
    "InternalError",
    "__version__",
]
