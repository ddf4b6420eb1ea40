from .tensor import (Tensor, add, as_tensor, backward, cast, charbonnier, concat, div, exp,
                     grad_enabled, leaky_relu, mean, mul, no_grad, record, reshape, sigmoid,
                     sub, tsum)
from .functional import (avg_pool2x, backwarp, conv2d, correlation, safe_div, sum_splat,
                         upsample_bilinear2x)
from .optim import AdamState, ParamSet, adam_step, clip_grad_norm, he_uniform

__all__ = [
    "Tensor", "add", "as_tensor", "backward", "cast", "charbonnier", "concat", "div", "exp",
    "grad_enabled", "leaky_relu", "mean", "mul", "no_grad", "record", "reshape", "sigmoid",
    "sub", "tsum", "avg_pool2x", "backwarp", "conv2d", "correlation", "safe_div", "sum_splat",
    "upsample_bilinear2x", "AdamState", "ParamSet", "adam_step", "clip_grad_norm", "he_uniform",
]
