"""Desk-scale training experiments: single-triplet overfit and the translating wall scene."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .checkpoint import Checkpoint
from .metrics import snnrmse
from .model import InterpModel
from .projection import ProjectionConfig, project, reconstruct
from .synthetic import MOTION_STEP, wall_ground_triplet
from .trainer import Triple, TrainConfig, finetune_all, train_flow, train_interp

# Phase 1 overfits far too slowly at the full-schedule 1e-4 within 200 steps.
OVERFIT_FLOW_LR = 1e-3
OVERFIT_INTERP_LR = 1e-4


@dataclass
class OverfitResult:
    flow_losses: List[float]
    interp_losses: List[float]
    seconds: float
    checkpoint: Checkpoint

    @property
    def flow_drop(self) -> float:
        return self.flow_losses[0] / self.flow_losses[-1]

    @property
    def interp_drop(self) -> float:
        return self.interp_losses[0] / self.interp_losses[-1]


def overfit(triple: Triple, iterations: int = 200, seed: int = 0, model_divisor: int = 1,
            flow_lr: float = OVERFIT_FLOW_LR, interp_lr: float = OVERFIT_INTERP_LR) -> OverfitResult:
    """Phases 1 and 2 on a single triplet with the lr schedule held constant."""
    h, w = triple[0].config.h, triple[0].config.w
    common = dict(epochs=iterations, iters_per_epoch=1, plateau_patience=iterations, seed=seed,
                  height=h, width=w, model_divisor=model_divisor)
    start = time.monotonic()
    ck, tr1 = train_flow(TrainConfig.for_phase("flow", lr0=flow_lr, **common), [triple])
    ck, tr2 = train_interp(TrainConfig.for_phase("interp", lr0=interp_lr, **common), [triple], ck)
    return OverfitResult(tr1.history, tr2.history, time.monotonic() - start, ck)


# -- translating wall + ground ------------------------------------------------------

@dataclass
class MotionConfig:
    n_train: int = 30
    n_test: int = 6
    height: int = 32
    width: int = 256
    model_divisor: int = 2
    flow_iters: int = 400
    interp_iters: int = 1200
    finetune_iters: int = 400
    flow_lr: float = 1e-3
    interp_lr: float = 3e-4
    finetune_lr: float = 1e-4
    seed: int = 0

    @property
    def total_iters(self) -> int:
        return self.flow_iters + self.interp_iters + self.finetune_iters


@dataclass
class MotionResult:
    model_error: List[float]
    copy_error: List[float]
    seconds: float
    checkpoint: Optional[Checkpoint] = field(default=None, repr=False)

    @property
    def mean_model(self) -> float:
        return math.fsum(self.model_error) / len(self.model_error)

    @property
    def mean_copy(self) -> float:
        return math.fsum(self.copy_error) / len(self.copy_error)


def motion_scenes(rng: np.random.Generator, cfg: ProjectionConfig, n: int):
    """``n`` (clouds, range-image triple) pairs of the wall + ground scene."""
    out = []
    for _ in range(n):
        clouds = wall_ground_triplet(rng, cfg, MOTION_STEP)
        out.append((clouds, tuple(project(c, cfg) for c in clouds)))
    return out


def evaluate_motion(model: InterpModel, scenes) -> tuple:
    model_err, copy_err = [], []
    for clouds, (r0, _, r2) in scenes:
        mid = clouds[1].xyz
        pred = reconstruct(model.interpolate(r0, r2, 0.5))
        model_err.append(snnrmse(pred.xyz, mid))
        copy_err.append(snnrmse(clouds[0].xyz, mid))
    return model_err, copy_err


def motion_experiment(mc: MotionConfig = MotionConfig()) -> MotionResult:
    """Train on ``n_train`` scenes, score t=0.5 against the exact middle frame of fresh scenes."""
    cfg = ProjectionConfig(mc.height, mc.width)
    rng = np.random.default_rng(mc.seed)
    train = [tri for _, tri in motion_scenes(rng, cfg, mc.n_train)]
    test = motion_scenes(rng, cfg, mc.n_test)
    start = time.monotonic()

    def phase(name, iters, lr):
        return TrainConfig.for_phase(name, epochs=max(1, iters // mc.n_train), iters_per_epoch=mc.n_train,
                                     lr0=lr, seed=mc.seed, height=mc.height, width=mc.width,
                                     model_divisor=mc.model_divisor, max_triplets=None)

    ck, _ = train_flow(phase("flow", mc.flow_iters, mc.flow_lr), train)
    ck, tr = train_interp(phase("interp", mc.interp_iters, mc.interp_lr), train, ck)
    if mc.finetune_iters:
        ck, tr = finetune_all(phase("finetune", mc.finetune_iters, mc.finetune_lr), train, ck)
    model_err, copy_err = evaluate_motion(tr.model, test)
    return MotionResult(model_err, copy_err, time.monotonic() - start, ck)
