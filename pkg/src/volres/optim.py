"""Nesterov-momentum SGD, Nadam, and the reduce-on-plateau schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError, DivergenceError

SGD_NESTEROV = "sgd_nesterov"
NADAM = "nadam"


@dataclass
class OptimizerConfig:
    kind: str = NADAM
    lr: float = 2e-4
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule_decay: float = 0.04

    def __post_init__(self):
        self.kind = self.kind.replace("-", "_")
        if self.kind not in (SGD_NESTEROV, NADAM):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        for name in ("momentum", "beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {v}")


@dataclass
class NadamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    m_schedule: float = 1.0  # running product of the momentum schedule

    @classmethod
    def zeros_like(cls, param):
        return cls(np.zeros_like(param), np.zeros_like(param))


@dataclass
class SGDState:
    velocity: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param):
        return cls(np.zeros_like(param))


def _check(param, grad):
    if param.shape != grad.shape:
        raise DimensionError(f"parameter shape {param.shape} != gradient shape {grad.shape}")


def sgd_nesterov_step(param, grad, state: SGDState, cfg: OptimizerConfig, lr=None):
    """``v <- mu v - lr g``; ``param <- param + mu v - lr g``."""
    _check(param, grad)
    lr = cfg.lr if lr is None else lr
    mu = cfg.momentum
    velocity = mu * state.velocity - lr * grad
    new = param + (mu * velocity - lr * grad)
    return new, SGDState(velocity, state.t + 1)


def momentum_schedule(t: int, cfg: OptimizerConfig) -> float:
    return cfg.beta1 * (1.0 - 0.5 * 0.96 ** (t * cfg.schedule_decay))


def nadam_step(param, grad, state: NadamState, cfg: OptimizerConfig, lr=None):
    """One Nadam update with the warming momentum schedule
    ``mu_t = beta1 (1 - 0.5 * 0.96 ** (t * schedule_decay))``."""
    _check(param, grad)
    lr = cfg.lr if lr is None else lr
    t = state.t + 1
    mu_t = momentum_schedule(t, cfg)
    mu_next = momentum_schedule(t + 1, cfg)
    prod_t = state.m_schedule * mu_t
    prod_next = prod_t * mu_next
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = mu_next * m / (1.0 - prod_next) + (1.0 - mu_t) * grad / (1.0 - prod_t)
    v_hat = v / (1.0 - cfg.beta2**t)
    new = param - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return new, NadamState(m, v, t, prod_t)


class Optimizer:
    """Applies one update rule to a named set of parameters (``Var`` objects)."""

    def __init__(self, params: dict, cfg: OptimizerConfig):
        self.params = params
        self.cfg = cfg
        self.lr = cfg.lr
        init = NadamState.zeros_like if cfg.kind == NADAM else SGDState.zeros_like
        self.state = {name: init(p.data) for name, p in params.items()}
        self._step = nadam_step if cfg.kind == NADAM else sgd_nesterov_step

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            p.data, self.state[name] = self._step(p.data, p.grad, self.state[name], self.cfg, self.lr)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # checkpoint round trip under flat names
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"lr": np.array([self.lr], dtype=np.float64)}
        for name, st in self.state.items():
            if isinstance(st, NadamState):
                out[f"{name}/m"] = st.m
                out[f"{name}/v"] = st.v
                out[f"{name}/sched"] = np.array([st.t, st.m_schedule], dtype=np.float64)
            else:
                out[f"{name}/velocity"] = st.velocity
                out[f"{name}/sched"] = np.array([st.t, 0.0], dtype=np.float64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.lr = float(arrays["lr"][0])
        for name, st in self.state.items():
            t, sched = arrays[f"{name}/sched"]
            if isinstance(st, NadamState):
                self.state[name] = NadamState(arrays[f"{name}/m"], arrays[f"{name}/v"], int(t), float(sched))
            else:
                self.state[name] = SGDState(arrays[f"{name}/velocity"], int(t))


@dataclass
class PlateauSchedule:
    """Reduce the learning rate once validation loss stops improving.

    ``reading="multiply"`` sets ``lr <- lr * factor``; ``reading="decrease"``
    sets ``lr <- lr * (1 - factor)``.
    """

    factor: float = 0.02
    patience: int = 3
    min_lr: float = 1e-7
    threshold: float = 1e-4
    reading: str = "multiply"
    best_loss: float = math.inf
    epochs_since_best: int = 0
    drops: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ConfigError(f"plateau factor must be in (0, 1), got {self.factor}")
        if self.reading not in ("multiply", "decrease"):
            raise ConfigError(f"unknown plateau reading {self.reading!r}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")

    def update(self, val_loss: float, current_lr: float, epoch: Optional[int] = None) -> float:
        if not math.isfinite(val_loss):
            raise DivergenceError(f"validation loss is {val_loss}", epoch=epoch)
        if val_loss < self.best_loss - self.threshold:
            self.best_loss = val_loss
            self.epochs_since_best = 0
            return current_lr
        self.epochs_since_best += 1
        if self.epochs_since_best < self.patience:
            return current_lr
        self.epochs_since_best = 0
        scale = self.factor if self.reading == "multiply" else 1.0 - self.factor
        new_lr = max(current_lr * scale, self.min_lr)
        if new_lr != current_lr:
            self.drops.append((epoch, current_lr, new_lr))
        return new_lr


def plateau_update(sched: PlateauSchedule, epoch_val_loss: float, current_lr: float) -> float:
    return sched.update(epoch_val_loss, current_lr)
