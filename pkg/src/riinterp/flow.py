"""Two-frame coarse-to-fine optical flow on range images.

A shared feature pyramid encodes both frames; from the coarsest level down,
frame-1 features are warped by the upsampled flow, correlated with frame-0
features, and a decoder shared across levels predicts a flow residual. The
finest level (half resolution) goes through a dilated context network.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import nd
from .layers import add_conv, conv
from .nd import ParamSet, Tensor
from .projection import RangeImage

RANGE_SCALE = 80.0


@dataclass(frozen=True)
class FlowConfig:
    levels: int = 4
    radius: int = 4
    pyramid_channels: Tuple[int, ...] = (16, 32, 64, 96)
    decoder_channels: Tuple[int, ...] = (128, 96, 64, 32)
    context_channels: int = 32
    context_dilations: Tuple[int, ...] = (1, 2, 4)

    def __post_init__(self):
        if len(self.pyramid_channels) != self.levels:
            raise ValueError("one pyramid width per level is required")


def normalize_stack(ri: RangeImage, scale: float = RANGE_SCALE) -> Tensor:
    """[4, H, W] network input (r, x, y, z) / scale with invalid pixels zeroed."""
    stack = ri.data[:4] * ri.valid[None]
    return Tensor((stack / scale).astype(np.float32))


def downsample_mask(mask: np.ndarray, times: int) -> np.ndarray:
    """A coarse pixel is valid only when its whole 2^times x 2^times block is valid."""
    m = np.asarray(mask, dtype=bool)
    for _ in range(times):
        h, w = m.shape[-2:]
        m = m.reshape(m.shape[:-2] + (h // 2, 2, w // 2, 2)).all(axis=(-3, -1))
    return m


def upsample_flow(flow: Tensor) -> Tensor:
    """Bilinear 2x upsampling with displacements rescaled to the finer grid."""
    return nd.upsample_bilinear2x(flow) * 2.0


class FlowNet:
    def __init__(self, config: FlowConfig = FlowConfig(), seed: int = 0,
                 params: Optional[ParamSet] = None):
        self.config = config
        if params is None:
            params = self.init_params(config, np.random.default_rng(seed))
        self.params = params

    @staticmethod
    def init_params(cfg: FlowConfig, rng: np.random.Generator) -> ParamSet:
        ps = ParamSet()
        cin = 4
        for lvl, ch in enumerate(cfg.pyramid_channels, start=1):
            add_conv(ps, f"flow.pyramid.l{lvl}.conv0", cin, ch, 3, rng)
            add_conv(ps, f"flow.pyramid.l{lvl}.conv1", ch, ch, 3, rng)
            cin = ch
        cin = (2 * cfg.radius + 1) ** 2 + 2
        for i, ch in enumerate(cfg.decoder_channels):
            add_conv(ps, f"flow.decoder.conv{i}", cin, ch, 3, rng)
            cin = ch
        add_conv(ps, "flow.decoder.out", cin, 2, 3, rng)
        cin = cfg.decoder_channels[-1] + 2
        for i, _ in enumerate(cfg.context_dilations):
            add_conv(ps, f"flow.context.conv{i}", cin, cfg.context_channels, 3, rng)
            cin = cfg.context_channels
        add_conv(ps, "flow.context.out", cin, 2, 3, rng)
        return ps

    # -- pieces ------------------------------------------------------------
    def build_pyramid(self, x: Tensor) -> List[Tensor]:
        """Feature levels 1..L, level l at 1/2^l resolution."""
        _, h, w = x.shape
        div = 2 ** self.config.levels
        if h % div or w % div:
            raise ValueError(f"input {h}x{w} is not divisible by {div}")
        levels = []
        for lvl in range(1, self.config.levels + 1):
            x = conv(self.params, f"flow.pyramid.l{lvl}.conv0", x, stride=2)
            x = conv(self.params, f"flow.pyramid.l{lvl}.conv1", x)
            levels.append(x)
        return levels

    def decode(self, corr: Tensor, up_flow: Tensor) -> Tuple[Tensor, Tensor]:
        x = nd.concat([corr, up_flow], axis=0)
        for i in range(len(self.config.decoder_channels)):
            x = conv(self.params, f"flow.decoder.conv{i}", x)
        return conv(self.params, "flow.decoder.out", x, act=False), x

    def context(self, flow: Tensor, hidden: Tensor) -> Tensor:
        x = nd.concat([flow, hidden], axis=0)
        for i, d in enumerate(self.config.context_dilations):
            x = conv(self.params, f"flow.context.conv{i}", x, dilation=d)
        return flow + conv(self.params, "flow.context.out", x, act=False)

    # -- estimation ---------------------------------------------------------
    def estimate(self, x0: Tensor, x1: Tensor, pyr0: Optional[List[Tensor]] = None,
                 pyr1: Optional[List[Tensor]] = None) -> List[Tensor]:
        """Flows from frame 0 to frame 1, coarse to fine; the last entry is level 1 (half resolution)."""
        if x0.shape != x1.shape:
            raise ValueError(f"frame shapes differ: {x0.shape} vs {x1.shape}")
        pyr0 = self.build_pyramid(x0) if pyr0 is None else pyr0
        pyr1 = self.build_pyramid(x1) if pyr1 is None else pyr1
        flows: List[Tensor] = []
        flow = None
        hidden = None
        for lvl in range(self.config.levels, 0, -1):
            f0, f1 = pyr0[lvl - 1], pyr1[lvl - 1]
            if flow is None:
                up = Tensor(np.zeros((2,) + f0.shape[1:], dtype=f0.dtype))
                warped = f1
            else:
                up = upsample_flow(flow)
                warped = nd.backwarp(f1, up)
            corr = nd.leaky_relu(nd.correlation(f0, warped, self.config.radius), 0.1)
            residual, hidden = self.decode(corr, up)
            flow = up + residual
            if lvl == 1:
                flow = self.context(flow, hidden)
            flows.append(flow)
        return flows

    def estimate_bidirectional(self, x0: Tensor, x1: Tensor) -> Tuple[List[Tensor], List[Tensor]]:
        pyr0 = self.build_pyramid(x0)
        pyr1 = self.build_pyramid(x1)
        return self.estimate(x0, x1, pyr0, pyr1), self.estimate(x1, x0, pyr1, pyr0)


def full_resolution(flow_level1: Tensor) -> Tensor:
    """Finest predicted flow (half resolution) brought to the image grid."""
    return upsample_flow(flow_level1)


def estimate_flow(r0: RangeImage, r1: RangeImage, net: FlowNet) -> List[Tensor]:
    if r0.config != r1.config:
        raise ValueError("range images were projected with different configs")
    return net.estimate(normalize_stack(r0), normalize_stack(r1))


def estimate_bidirectional(r0: RangeImage, r1: RangeImage, net: FlowNet) -> Tuple[List[Tensor], List[Tensor]]:
    if r0.config != r1.config:
        raise ValueError("range images were projected with different configs")
    return net.estimate_bidirectional(normalize_stack(r0), normalize_stack(r1))


def warp_pyramid(stack: Tensor, flows: List[Tensor]) -> List[Tensor]:
    """Backwarp ``stack`` pooled to each flow's level; flows are ordered coarse to fine."""
    out = []
    levels = len(flows)
    pooled = [stack]
    for _ in range(levels):
        pooled.append(nd.avg_pool2x(pooled[-1]))
    for i, flow in enumerate(flows):
        lvl = levels - i
        out.append(nd.backwarp(pooled[lvl], flow))
    return out


def pooled_pyramid(stack: Tensor, levels: int) -> List[Tensor]:
    """Average-pooled copies at levels L..1 (coarse to fine), matching ``estimate`` order."""
    pooled = [stack]
    for _ in range(levels):
        pooled.append(nd.avg_pool2x(pooled[-1]))
    return [pooled[lvl] for lvl in range(levels, 0, -1)]
