from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
import numpy.typing as npt

from autodiff.tensor import Tensor

Array = npt.NDArray[np.float64]


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 1e-4
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.lr <= 0.0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.weight_decay < 0.0 or self.eps <= 0.0:
            raise ValueError("weight_decay must be >= 0 and eps > 0")


@dataclass
class AdamState:
    config: OptimizerConfig
    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)

    def arrays(self, prefix: str) -> dict[str, npt.NDArray[Any]]:
        out: dict[str, npt.NDArray[Any]] = {f"{prefix}step": np.array([self.step], dtype=np.int64)}
        for name in self.m:
            out[f"{prefix}m.{name}"] = self.m[name].copy()
            out[f"{prefix}v.{name}"] = self.v[name].copy()
        return out

    @classmethod
    def from_arrays(cls, config: OptimizerConfig, arrays: Mapping[str, npt.NDArray[Any]]) -> AdamState:
        state = cls(config=config, step=int(arrays["step"][0]))
        for key, value in arrays.items():
            if key.startswith("m."):
                state.m[key[2:]] = np.array(value, dtype=np.float64)
            elif key.startswith("v."):
                state.v[key[2:]] = np.array(value, dtype=np.float64)
        return state


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Array | None], state: AdamState) -> None:
    """One bias-corrected Adam update with coupled L2 weight decay (g += wd * p).

    Parameters without a gradient are treated as having gradient zero. Each
    parameter's ``data`` is replaced, not mutated, so arrays handed out
    earlier keep their values.
    """
    cfg = state.config
    if cfg.lr <= 0.0:
        raise ValueError(f"learning rate must be positive, got {cfg.lr}")
    state.step += 1
    bc1 = 1.0 - cfg.beta1**state.step
    bc2 = 1.0 - cfg.beta2**state.step
    for name, param in params.items():
        grad = grads.get(name)
        g = np.zeros_like(param.data) if grad is None else grad
        if g.shape != param.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {param.data.shape}")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * param.data
        m = cfg.beta1 * state.m.get(name, np.zeros_like(g)) + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v.get(name, np.zeros_like(g)) + (1.0 - cfg.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        param.data = param.data - cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


class Adam:
    """Adam over a fixed, named parameter set."""

    def __init__(self, params: Mapping[str, Tensor], config: OptimizerConfig, state: AdamState | None = None) -> None:
        self.params = dict(params)
        self.state = state if state is not None else AdamState(config=config)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def step(self) -> None:
        adam_step(self.params, {name: p.grad for name, p in self.params.items()}, self.state)
