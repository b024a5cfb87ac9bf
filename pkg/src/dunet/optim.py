"""Optimizers operating in place on :class:`~dunet.autodiff.Parameter` dicts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter, ShapeError


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Parameter]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = _checked_grad(p)
            m = self.m.setdefault(name, np.zeros_like(p.value))
            v = self.v.setdefault(name, np.zeros_like(p.value))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.value -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)


@dataclass
class SGD:
    lr: float = 1e-2

    def step(self, params: dict[str, Parameter]) -> None:
        for p in params.values():
            p.value -= (self.lr * _checked_grad(p)).astype(p.value.dtype)


def _checked_grad(p: Parameter) -> np.ndarray:
    if p.grad is None:
        return np.zeros_like(p.value)
    if p.grad.shape != p.value.shape:
        raise ShapeError(f"{p.name}: grad shape {p.grad.shape} != param shape {p.value.shape}")
    return p.grad


def make_optimizer(kind: str, lr: float):
    if kind == "adam":
        return Adam(lr=lr)
    if kind == "sgd":
        return SGD(lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")
