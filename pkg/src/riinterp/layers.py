"""Conv layer bookkeeping on top of a ParamSet."""
from __future__ import annotations

import numpy as np

from . import nd
from .nd import ParamSet, Tensor

LRELU_ALPHA = 0.1


def add_conv(ps: ParamSet, name: str, cin: int, cout: int, k: int, rng: np.random.Generator,
             zero: bool = False, bias_init: float = 0.0) -> None:
    shape = (cout, cin, k, k)
    w = np.zeros(shape, dtype=np.float32) if zero else nd.he_uniform(rng, shape, LRELU_ALPHA)
    ps.add(f"{name}.weight", w)
    ps.add(f"{name}.bias", np.full(cout, bias_init, dtype=np.float32))


def conv(ps: ParamSet, name: str, x: Tensor, stride: int = 1, dilation: int = 1, act: bool = True) -> Tensor:
    w = ps[f"{name}.weight"]
    k = w.shape[-1]
    y = nd.conv2d(x, w, ps[f"{name}.bias"], stride=stride, padding=dilation * (k // 2), dilation=dilation)
    return nd.leaky_relu(y, LRELU_ALPHA) if act else y
