"""SGD and Adam parameter updates with optional per-epoch learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter, ShapeMismatch


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.5
    lr_decay: float = 1.0  # multiplicative per epoch; 1.0 disables decay
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def optimizer_step(
    params: list[Parameter],
    grads: list[np.ndarray],
    config: OptimizerConfig,
    state: AdamState | None = None,
    lr: float | None = None,
) -> AdamState | None:
    """Apply one update in place; returns the (possibly new) optimizer state."""
    config.validate()
    if len(params) != len(grads):
        raise ShapeMismatch("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.data.shape != np.shape(g):
            raise ShapeMismatch(f"grad shape {np.shape(g)} != param shape {p.data.shape}")
    step_lr = config.lr if lr is None else lr
    if config.kind == "sgd":
        for p, g in zip(params, grads):
            p.data = p.data - step_lr * g
        return state
    if state is None:
        state = AdamState(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        m_hat = state.m[i] / (1 - b1 ** state.t)
        v_hat = state.v[i] / (1 - b2 ** state.t)
        p.data = p.data - step_lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return state


class Optimizer:
    """Stateful wrapper over optimizer_step driven by each Parameter's .grad."""

    def __init__(self, params: list[Parameter], config: OptimizerConfig):
        config.validate()
        self.params = list(params)
        self.config = config
        self._state: AdamState | None = None
        self._epoch = 0

    @property
    def lr(self) -> float:
        return self.config.lr * (self.config.lr_decay ** self._epoch)

    def set_epoch(self, epoch: int) -> None:
        self._epoch = epoch

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        self._state = optimizer_step(self.params, grads, self.config, self._state, lr=self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
