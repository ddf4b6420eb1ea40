"""Three-phase training: flow from scratch, synthesis with frozen flow, joint fine-tuning."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import nd
from .checkpoint import Checkpoint, save_checkpoint
from .flow import RANGE_SCALE, FlowConfig, downsample_mask, normalize_stack, pooled_pyramid
from .losses import LossWeights, flow_loss, interp_loss
from .model import InterpModel, ModelConfig, UNetConfig
from .nd import ParamSet, Tensor
from .projection import ProjectionConfig, RangeImage

log = logging.getLogger(__name__)

PHASES = ("flow", "interp", "finetune")
IMPROVEMENT_EPS = 1e-8

Triple = Tuple[RangeImage, RangeImage, RangeImage]


class PhaseError(RuntimeError):
    """A training phase was started without its prerequisites."""


@dataclass
class TrainConfig:
    phase: str = "flow"
    epochs: int = 40
    iters_per_epoch: Optional[int] = None
    lr0: float = 1e-4
    plateau_factor: float = 0.1
    plateau_patience: int = 4
    batch_size: int = 1
    seed: int = 0
    max_triplets: Optional[int] = 64
    height: int = 64
    width: int = 256
    clip_norm: float = 10.0
    t: float = 0.5
    model_divisor: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-7

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")

    @classmethod
    def for_phase(cls, phase: str, **overrides) -> "TrainConfig":
        """Paper schedule per phase: 40/40/20 epochs; lr 1e-4, 1e-4, 1e-5; plateau 0.1/4, 0.1/4, 0.2/5."""
        base = {
            "flow": dict(epochs=40, lr0=1e-4, plateau_factor=0.1, plateau_patience=4),
            "interp": dict(epochs=40, lr0=1e-4, plateau_factor=0.1, plateau_patience=4),
            "finetune": dict(epochs=20, lr0=1e-5, plateau_factor=0.2, plateau_patience=5),
        }[phase]
        base.update(overrides)
        return cls(phase=phase, **base)


@dataclass
class PlateauState:
    best_val: float = math.inf
    epochs_since_improve: int = 0
    current_lr: float = 1e-4


def plateau_step(state: PlateauState, val_loss: float, factor: float, patience: int) -> PlateauState:
    """Reduce-on-plateau: the counter resets on improvement; exceeding ``patience`` scales lr."""
    if not math.isfinite(val_loss):
        raise ValueError("validation loss must be finite")
    if val_loss < state.best_val - IMPROVEMENT_EPS:
        state.best_val = val_loss
        state.epochs_since_improve = 0
    else:
        state.epochs_since_improve += 1
        if state.epochs_since_improve > patience:
            state.current_lr *= factor
            state.epochs_since_improve = 0
    return state


# -- objectives -------------------------------------------------------------

def flow_objective(model: InterpModel, r0: RangeImage, r1: RangeImage) -> Tensor:
    """Charbonnier photometric loss on the range channel, both directions, all pyramid levels."""
    x0, x1 = normalize_stack(r0), normalize_stack(r1)
    f01, f10 = model.flow.estimate_bidirectional(x0, x1)
    levels = model.config.flow.levels
    p0 = pooled_pyramid(x0[0:1], levels)
    p1 = pooled_pyramid(x1[0:1], levels)
    masks0 = [downsample_mask(r0.valid, lvl)[None] for lvl in range(levels, 0, -1)]
    masks1 = [downsample_mask(r1.valid, lvl)[None] for lvl in range(levels, 0, -1)]
    fwd = flow_loss([nd.backwarp(src, f) for src, f in zip(p1, f01)], p0, masks0, per_pixel=True)
    bwd = flow_loss([nd.backwarp(src, f) for src, f in zip(p0, f10)], p1, masks1, per_pixel=True)
    return (fwd + bwd) * 0.5


def interp_objective(model: InterpModel, triple: Triple, t: float, train_flow: bool,
                     weights: LossWeights = LossWeights()) -> Tensor:
    r0, gt, r1 = triple
    syn = model.synthesize(r0, r1, t, train_flow=train_flow)
    target = Tensor((gt.range * gt.valid / RANGE_SCALE)[None].astype(np.float32))
    return interp_loss(syn.coarse, syn.fine, target, gt.valid[None], weights, per_pixel=True)


# -- config (de)serialization ---------------------------------------------------

def model_config_to_dict(cfg: ModelConfig) -> dict:
    return {"flow": dataclasses.asdict(cfg.flow), "unet": {"encoder": list(cfg.unet.encoder)},
            "features": cfg.features}


def model_config_from_dict(d: dict) -> ModelConfig:
    fl = {k: tuple(v) if isinstance(v, list) else v for k, v in d["flow"].items()}
    return ModelConfig(flow=FlowConfig(**fl), unet=UNetConfig(tuple(d["unet"]["encoder"])),
                       features=int(d["features"]))


def model_from_checkpoint(ckpt: Checkpoint) -> InterpModel:
    cfg = model_config_from_dict(ckpt.meta["model"])
    flow_ps, interp_ps = ParamSet(), ParamSet()
    for name, arr in ckpt.params.items():
        (flow_ps if name.startswith("flow.") else interp_ps).add(name, arr.copy())
    model = InterpModel(cfg, flow_params=flow_ps, interp_params=interp_ps)
    expected = InterpModel.init_params(cfg, np.random.default_rng(0))
    for name, t in expected.items():
        if name not in interp_ps or interp_ps[name].shape != t.shape:
            raise ValueError(f"checkpoint parameter {name!r} is missing or has the wrong shape")
    return model


# -- training loop ----------------------------------------------------------------

class Trainer:
    def __init__(self, model: InterpModel, cfg: TrainConfig, log_path=None,
                 on_record: Optional[Callable[[dict], None]] = None):
        self.model = model
        self.cfg = cfg
        self.log_path = Path(log_path) if log_path else None
        self.on_record = on_record
        self.params = model.params if cfg.phase == "interp" else (
            model.flow.params if cfg.phase == "flow" else ParamSet.union(model.flow.params, model.params))
        self.adam = nd.AdamState()
        self.plateau = PlateauState(current_lr=cfg.lr0)
        self.rng = np.random.default_rng(cfg.seed)
        self.queue: List[int] = []
        self.iteration = 0
        self.epoch = 0
        self.history: List[float] = []
        self.records: List[dict] = []

    # -- single steps ------------------------------------------------------------
    def objective(self, triple: Triple) -> Tensor:
        if self.cfg.phase == "flow":
            return flow_objective(self.model, triple[0], triple[2])
        return interp_objective(self.model, triple, self.cfg.t, train_flow=self.cfg.phase == "finetune")

    def evaluate(self, data: Sequence[Triple]) -> float:
        with nd.no_grad():
            vals = [self.objective(tr).item() for tr in data]
        return float(math.fsum(vals) / len(vals))

    def step(self, triple: Triple) -> float:
        for p in self.params.values():
            p.grad = None
        loss = self.objective(triple)
        nd.backward(loss, self.params.values())
        nd.clip_grad_norm(self.params.values(), self.cfg.clip_norm)
        nd.adam_step(self.params, self.adam, self.plateau.current_lr,
                     self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps)
        for p in self.params.values():
            p.grad = None
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss at iteration {self.iteration}")
        self.history.append(value)
        self.iteration += 1
        return value

    def _next_index(self, n: int) -> int:
        if not self.queue:
            self.queue = [int(i) for i in self.rng.permutation(n)]
        return self.queue.pop(0)

    def run(self, train: Sequence[Triple], val: Sequence[Triple] = (), ckpt_path=None) -> Checkpoint:
        if not train:
            raise ValueError("training set is empty")
        per_epoch = self.cfg.iters_per_epoch or len(train)
        while self.epoch < self.cfg.epochs:
            losses = [self.step(train[self._next_index(len(train))]) for _ in range(per_epoch)]
            train_loss = float(math.fsum(losses) / len(losses))
            val_loss = self.evaluate(val) if val else train_loss
            lr = self.plateau.current_lr
            plateau_step(self.plateau, val_loss, self.cfg.plateau_factor, self.cfg.plateau_patience)
            self.epoch += 1
            self._log({"epoch": self.epoch, "phase": self.cfg.phase, "lr": lr,
                       "train_loss": train_loss, "val_loss": val_loss, "iteration": self.iteration})
            if ckpt_path is not None:
                save_checkpoint(ckpt_path, self.checkpoint())
        return self.checkpoint()

    def _log(self, rec: dict) -> None:
        self.records.append(rec)
        log.info("epoch %d phase %s lr %.3g train %.6f val %.6f", rec["epoch"], rec["phase"], rec["lr"],
                 rec["train_loss"], rec["val_loss"])
        if self.log_path is not None:
            with open(self.log_path, "a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        if self.on_record is not None:
            self.on_record(rec)

    # -- checkpoints -------------------------------------------------------------
    def checkpoint(self, projection: Optional[ProjectionConfig] = None) -> Checkpoint:
        params = {name: t.data.copy() for name, t in self.model.all_params().items()}
        meta = {
            "phase": self.cfg.phase,
            "iteration": self.iteration,
            "epoch": self.epoch,
            "adam_step": self.adam.step,
            "plateau": dataclasses.asdict(self.plateau),
            "rng": self.rng.bit_generator.state,
            "queue": list(self.queue),
            "model": model_config_to_dict(self.model.config),
            "train": dataclasses.asdict(self.cfg),
            "projection": {"h": self.cfg.height, "w": self.cfg.width},
        }
        return Checkpoint(params, meta, {k: v.copy() for k, v in self.adam.m.items()},
                          {k: v.copy() for k, v in self.adam.v.items()})

    def restore(self, ckpt: Checkpoint) -> None:
        """Resume optimizer, schedule and sampling state from a checkpoint of the same phase."""
        if ckpt.phase != self.cfg.phase:
            raise PhaseError(f"cannot resume phase {self.cfg.phase!r} from a {ckpt.phase!r} checkpoint")
        meta = ckpt.meta
        self.iteration = int(meta["iteration"])
        self.epoch = int(meta["epoch"])
        self.adam = nd.AdamState(int(meta["adam_step"]), {k: v.copy() for k, v in ckpt.adam_m.items()},
                                 {k: v.copy() for k, v in ckpt.adam_v.items()})
        self.plateau = PlateauState(**meta["plateau"])
        self.rng.bit_generator.state = meta["rng"]
        self.queue = [int(i) for i in meta["queue"]]


# -- phase entry points -------------------------------------------------------------

def _require(ckpt: Optional[Checkpoint], allowed: Tuple[str, ...], what: str) -> Checkpoint:
    if ckpt is None:
        raise PhaseError(f"{what} requires a checkpoint from phase {' or '.join(allowed)}")
    if ckpt.phase not in allowed:
        raise PhaseError(f"{what} requires a checkpoint from phase {' or '.join(allowed)}, got {ckpt.phase!r}")
    return ckpt


def _fresh_model(cfg: TrainConfig) -> InterpModel:
    mcfg = ModelConfig.scaled(cfg.model_divisor) if cfg.model_divisor > 1 else ModelConfig()
    return InterpModel(mcfg, seed=cfg.seed)


def build_trainer(cfg: TrainConfig, init: Optional[Checkpoint] = None, resume: Optional[Checkpoint] = None,
                  model: Optional[InterpModel] = None, **kw) -> Trainer:
    """Trainer for ``cfg.phase``, checking the phase prerequisites.

    ``init`` is the previous phase's checkpoint; ``resume`` continues an interrupted run of the same phase.
    """
    if resume is not None:
        tr = Trainer(model_from_checkpoint(resume), cfg, **kw)
        tr.restore(resume)
        return tr
    if cfg.phase == "flow":
        model = model or (model_from_checkpoint(init) if init is not None else _fresh_model(cfg))
    elif cfg.phase == "interp":
        model = model_from_checkpoint(_require(init, ("flow",), "phase 'interp'"))
    else:
        model = model_from_checkpoint(_require(init, ("interp", "finetune"), "phase 'finetune'"))
    return Trainer(model, cfg, **kw)


def _run_phase(phase: str, cfg: TrainConfig, train, val, **kw) -> Tuple[Checkpoint, Trainer]:
    if cfg.phase != phase:
        raise PhaseError(f"expected a config for phase {phase!r}, got {cfg.phase!r}")
    ckpt_path = kw.pop("ckpt_path", None)
    tr = build_trainer(cfg, **kw)
    return tr.run(train, val, ckpt_path), tr


def train_flow(cfg: TrainConfig, train: Sequence[Triple], val: Sequence[Triple] = (),
               model: Optional[InterpModel] = None, **kw) -> Tuple[Checkpoint, Trainer]:
    return _run_phase("flow", cfg, train, val, model=model, **kw)


def train_interp(cfg: TrainConfig, train: Sequence[Triple], flow_ckpt: Optional[Checkpoint],
                 val: Sequence[Triple] = (), **kw) -> Tuple[Checkpoint, Trainer]:
    return _run_phase("interp", cfg, train, val, init=flow_ckpt, **kw)


def finetune_all(cfg: TrainConfig, train: Sequence[Triple], ckpt: Optional[Checkpoint],
                 val: Sequence[Triple] = (), **kw) -> Tuple[Checkpoint, Trainer]:
    return _run_phase("finetune", cfg, train, val, init=ckpt, **kw)
