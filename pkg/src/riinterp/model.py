"""Range-adaptive interpolation network.

Pipeline for one pair of range images and a time t:
bidirectional flow -> linear scaling to t -> softmax splatting of the input
stacks and their SAC features -> pre-synthesis U-Net -> residual refinement
U-Net guided by both input stacks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import nd
from .flow import RANGE_SCALE, FlowConfig, FlowNet, full_resolution, normalize_stack
from .layers import add_conv, conv
from .nd import ParamSet, Tensor
from .projection import RangeImage, range_image_from_range

FEATURES = 32
SAC_BLOCKS = 3
INVALID_IMPORTANCE = -20.0


@dataclass(frozen=True)
class UNetConfig:
    encoder: Tuple[int, ...] = (32, 64, 128, 256, 512, 512)

    @property
    def decoder(self) -> Tuple[int, ...]:
        # one decoder stage per skip, coarse to fine
        return tuple(reversed(self.encoder[:-1]))

    @property
    def factor(self) -> int:
        return 2 ** (len(self.encoder) - 1)


@dataclass(frozen=True)
class ModelConfig:
    flow: FlowConfig = field(default_factory=FlowConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    features: int = FEATURES

    @property
    def presynth_inputs(self) -> int:
        return 2 * (4 + self.features + 1)

    @classmethod
    def scaled(cls, divisor: int) -> "ModelConfig":
        """Same topology with every learned width divided by ``divisor`` (desk-scale runs)."""
        def sc(ws):
            return tuple(max(2, w // divisor) for w in ws)
        base = cls()
        flow = FlowConfig(levels=base.flow.levels, radius=base.flow.radius,
                          pyramid_channels=sc(base.flow.pyramid_channels),
                          decoder_channels=sc(base.flow.decoder_channels),
                          context_channels=max(2, base.flow.context_channels // divisor),
                          context_dilations=base.flow.context_dilations)
        return cls(flow=flow, unet=UNetConfig(sc(base.unet.encoder)),
                   features=max(2, FEATURES // divisor))


# -- parameter construction -------------------------------------------------

def _init_extractor(ps: ParamSet, feats: int, rng) -> None:
    add_conv(ps, "interp.extractor.conv", 4, feats, 3, rng)
    for b in range(SAC_BLOCKS):
        add_conv(ps, f"interp.extractor.sac{b}.gate", 4, feats, 7, rng)
        add_conv(ps, f"interp.extractor.sac{b}.conv", feats, feats, 3, rng)


def _init_unet(ps: ParamSet, prefix: str, cin: int, cfg: UNetConfig, rng, zero_head: bool) -> None:
    c = cin
    for i, ch in enumerate(cfg.encoder):
        add_conv(ps, f"{prefix}.enc{i}", c, ch, 3, rng)
        c = ch
    skips = list(reversed(cfg.encoder[:-1]))
    for j, (ch, skip) in enumerate(zip(cfg.decoder, skips)):
        add_conv(ps, f"{prefix}.dec{j}", c + skip, ch, 3, rng)
        c = ch
    add_conv(ps, f"{prefix}.head", c, 1, 3, rng, zero=zero_head)


# -- forward pieces ---------------------------------------------------------

def sac_forward(features: Tensor, raw: Tensor, ps: ParamSet, name: str) -> Tensor:
    """Gate features with sigmoid(conv7x7(raw)), then conv3x3 + leaky ReLU."""
    if features.shape[1:] != raw.shape[1:]:
        raise ValueError(f"SAC feature grid {features.shape} does not match raw input {raw.shape}")
    gate = nd.sigmoid(conv(ps, f"{name}.gate", raw, act=False))
    if gate.shape != features.shape:
        raise ValueError(f"SAC gate {gate.shape} does not match features {features.shape}")
    return conv(ps, f"{name}.conv", gate * features)


def sac_gate(raw: Tensor, ps: ParamSet, name: str) -> Tensor:
    return nd.sigmoid(conv(ps, f"{name}.gate", raw, act=False))


def extract_features(stack: Tensor, ps: ParamSet) -> Tensor:
    x = conv(ps, "interp.extractor.conv", stack)
    for b in range(SAC_BLOCKS):
        x = sac_forward(x, stack, ps, f"interp.extractor.sac{b}")
    return x


def unet_forward(x: Tensor, ps: ParamSet, prefix: str, cfg: UNetConfig) -> Tensor:
    _, h, w = x.shape
    if h % cfg.factor or w % cfg.factor:
        raise ValueError(f"U-Net input {h}x{w} is not divisible by {cfg.factor}")
    skips = []
    for i in range(len(cfg.encoder)):
        x = conv(ps, f"{prefix}.enc{i}", x, stride=1 if i == 0 else 2)
        skips.append(x)
    skips.pop()
    for j in range(len(cfg.decoder)):
        x = nd.concat([nd.upsample_bilinear2x(x), skips.pop()], axis=0)
        x = conv(ps, f"{prefix}.dec{j}", x)
    return conv(ps, f"{prefix}.head", x, act=False)


def scale_flows(f01: Tensor, f10: Tensor, t: float) -> Tuple[Tensor, Tensor]:
    """Linear motion: F_0->t = t F_01, F_1->t = (1 - t) F_10."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return f01 * float(t), f10 * float(1.0 - t)


def compute_importance(ri: RangeImage) -> Tensor:
    """Splatting importance: -r/10 on valid pixels, -20 elsewhere."""
    z = np.where(ri.valid, -ri.range / 10.0, INVALID_IMPORTANCE)
    return Tensor(z[None].astype(np.float32))


def softmax_splat(source: Tensor, flow: Tensor, importance: Tensor,
                  mask: Optional[np.ndarray] = None) -> Tuple[Tensor, np.ndarray]:
    """Forward-warp ``source`` by ``flow``; collisions blend with weights exp(importance).

    ``mask`` restricts which source pixels are pushed. Returns the warped image
    and the boolean [1,H,W] coverage mask (targets that received any weight);
    uncovered targets are exactly zero.
    """
    c, h, w = source.shape
    if flow.shape != (2, h, w) or importance.shape != (1, h, w):
        raise ValueError("source, flow and importance grids must agree")
    # shifting by a constant leaves the ratio unchanged and keeps exp in range
    zmax = float(np.max(importance.data))
    weight = nd.exp(importance - zmax)
    if mask is not None:
        weight = weight * np.asarray(mask, dtype=weight.dtype).reshape(1, h, w)
    num = nd.sum_splat(source * weight, flow)
    den = nd.sum_splat(weight, flow)
    return nd.safe_div(num, den), den.data > 0


def presynthesize(warped0: Tensor, warped1: Tensor, feat0w: Tensor, feat1w: Tensor,
                  cover0, cover1, ps: ParamSet, cfg: UNetConfig) -> Tensor:
    c0 = Tensor(np.asarray(cover0, dtype=warped0.dtype).reshape((1,) + warped0.shape[1:]))
    c1 = Tensor(np.asarray(cover1, dtype=warped0.dtype).reshape((1,) + warped0.shape[1:]))
    x = nd.concat([warped0, warped1, feat0w, feat1w, c0, c1], axis=0)
    return unet_forward(x, ps, "interp.presynth", cfg)


def refine(coarse: Tensor, stack0: Tensor, stack1: Tensor, ps: ParamSet, cfg: UNetConfig) -> Tensor:
    x = nd.concat([coarse, stack0, stack1], axis=0)
    return coarse + unet_forward(x, ps, "interp.refine", cfg)


@dataclass
class Synthesis:
    coarse: Tensor
    fine: Tensor
    valid: np.ndarray
    flows01: list
    flows10: list


class InterpModel:
    """Flow estimator plus the range-adaptive synthesis networks."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0,
                 flow_params: Optional[ParamSet] = None, interp_params: Optional[ParamSet] = None):
        self.config = config
        rng = np.random.default_rng(seed)
        self.flow = FlowNet(config.flow, params=flow_params if flow_params is not None
                            else FlowNet.init_params(config.flow, rng))
        if interp_params is None:
            interp_params = self.init_params(config, rng)
        self.params = interp_params

    @staticmethod
    def init_params(cfg: ModelConfig, rng) -> ParamSet:
        ps = ParamSet()
        _init_extractor(ps, cfg.features, rng)
        _init_unet(ps, "interp.presynth", cfg.presynth_inputs, cfg.unet, rng, zero_head=False)
        _init_unet(ps, "interp.refine", 9, cfg.unet, rng, zero_head=True)
        return ps

    def all_params(self) -> dict:
        return {**dict(self.flow.params), **dict(self.params)}

    def check_input(self, r0: RangeImage, r1: RangeImage) -> None:
        if r0.config != r1.config:
            raise ValueError("range images were projected with different configs")
        div = max(2 ** self.config.flow.levels, self.config.unet.factor)
        if r0.config.h % div or r0.config.w % div:
            raise ValueError(f"image {r0.config.h}x{r0.config.w} is not divisible by {div}")

    def synthesize(self, r0: RangeImage, r1: RangeImage, t: float = 0.5,
                   train_flow: bool = True) -> Synthesis:
        self.check_input(r0, r1)
        x0, x1 = normalize_stack(r0), normalize_stack(r1)
        if train_flow:
            pyr01, pyr10 = self.flow.estimate_bidirectional(x0, x1)
        else:
            with nd.no_grad():
                pyr01, pyr10 = self.flow.estimate_bidirectional(x0, x1)
        f01 = full_resolution(pyr01[-1])
        f10 = full_resolution(pyr10[-1])
        f0t, f1t = scale_flows(f01, f10, t)

        feat0 = extract_features(x0, self.params)
        feat1 = extract_features(x1, self.params)
        warped0, cover0 = softmax_splat(nd.concat([x0, feat0], axis=0), f0t, compute_importance(r0), r0.valid)
        warped1, cover1 = softmax_splat(nd.concat([x1, feat1], axis=0), f1t, compute_importance(r1), r1.valid)
        coarse = presynthesize(warped0[0:4], warped1[0:4], warped0[4:], warped1[4:],
                               cover0, cover1, self.params, self.config.unet)
        fine = refine(coarse, x0, x1, self.params, self.config.unet)
        return Synthesis(coarse, fine, (cover0 | cover1)[0], pyr01, pyr10)

    def interpolate(self, r0: RangeImage, r1: RangeImage, t: float = 0.5) -> RangeImage:
        """Synthesized range image at time t; x, y, z come from back-projecting the range."""
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {t}")
        with nd.no_grad():
            syn = self.synthesize(r0, r1, t)
        r = syn.fine.data[0].astype(np.float64) * RANGE_SCALE
        valid = syn.valid & (r > 0)
        return range_image_from_range(r, valid, r0.config)
