"""Parameter storage, AdamW and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError
from .autograd import Tensor, parameter

LEARNING_RATE = 2e-3
WEIGHT_DECAY = 5e-2


class ParamStore:
    """Ordered name -> parameter tensor mapping."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = parameter(np.ascontiguousarray(data), name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self._params.items():
            a = arrays[k]
            if a.shape != t.data.shape:
                raise ShapeError(f"{k}: stored shape {a.shape} != {t.data.shape}")
            t.data = a.astype(t.data.dtype, copy=True)


@dataclass
class AdamHyper:
    lr: float = LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = WEIGHT_DECAY


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, state: AdamState, hyper: AdamHyper, lr: float | None = None) -> None:
    """One AdamW update using the ``.grad`` of every parameter.

    Weight decay is decoupled: ``p -= lr * wd * p`` before the moment update
    is applied.  Parameters without a gradient are treated as zero-gradient.
    """
    lr = hyper.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ShapeError(f"{name}: moment shape {m.shape} != {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if hyper.weight_decay:
            p.data *= 1.0 - lr * hyper.weight_decay
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + hyper.eps)


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0,
              min_lr: float = 0.0) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to ``min_lr``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))
