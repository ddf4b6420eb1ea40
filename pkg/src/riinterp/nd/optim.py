"""Parameter tables, initialization, and the ADAM update."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, Mapping

import numpy as np

from .tensor import Tensor


class ParamSet(Mapping[str, Tensor]):
    """Ordered name -> Tensor table. Names are unique; insertion order is stable."""

    def __init__(self):
        self._items: Dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._items:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._items[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    @classmethod
    def union(cls, *sets: "ParamSet") -> "ParamSet":
        """A view sharing the tensors of several disjoint sets."""
        out = cls()
        for s in sets:
            for name, t in s.items():
                if name in out._items:
                    raise KeyError(f"duplicate parameter name {name!r}")
                out._items[name] = t
        return out

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = np.zeros_like(t.data)

    def astype(self, dtype) -> None:
        for t in self._items.values():
            t.data = t.data.astype(dtype)
            t.grad = None

    def numel(self) -> int:
        return sum(t.size for t in self._items.values())


def he_uniform(rng: np.random.Generator, shape: tuple, alpha: float = 0.1, dtype=np.float32) -> np.ndarray:
    """Fan-in scaled uniform init for conv weights feeding a leaky ReLU."""
    fan_in = int(np.prod(shape[1:]))
    gain = np.sqrt(2.0 / (1.0 + alpha ** 2))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= np.asarray(scale, dtype=p.grad.dtype)
    return total


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7) -> AdamState:
    """One bias-corrected ADAM update applied in place to every parameter with a gradient."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ValueError(f"optimizer state shape {m.shape} does not match parameter {name!r}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m.astype(p.dtype)
        state.v[name] = v.astype(p.dtype)
        mhat = m / c1
        vhat = v / c2
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    return state
