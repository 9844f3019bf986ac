"""Optimizers over flat FP32 parameter vectors, and LR schedulers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from seqforge.numerics.half import quantize_fp32
from seqforge.registry import REGISTRY, Config


def _check_finite(grads):
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient passed to the optimizer")


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    _check_finite(grads)
    return quantize_fp32(params - lr * grads)


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def zeros(cls, n: int, **hyper) -> OptimizerState:
        return cls(np.zeros(n), np.zeros(n), **hyper)


def adam_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState, lr: float):
    """One bias-corrected Adam update; returns (params, state)."""
    _check_finite(grads)
    g = grads
    if state.weight_decay:
        g = quantize_fp32(g + state.weight_decay * params)
    t = state.t + 1
    m = quantize_fp32(state.beta1 * state.m + (1.0 - state.beta1) * g)
    v = quantize_fp32(state.beta2 * state.v + (1.0 - state.beta2) * g * g)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = quantize_fp32(params - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return new, OptimizerState(m, v, t, state.beta1, state.beta2, state.eps, state.weight_decay)


class SGD:
    name = "sgd"

    def __init__(self, n: int):
        self.state = OptimizerState.zeros(n)

    def step(self, params, grads, lr):
        params = sgd_step(params, grads, lr)
        self.state.t += 1
        return params

    def state_dict(self) -> dict:
        return {"t": self.state.t}

    def load_state_dict(self, d: dict) -> None:
        self.state.t = int(d["t"])


class Adam:
    name = "adam"

    def __init__(self, n: int, beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=0.0):
        self.state = OptimizerState.zeros(n, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)

    def step(self, params, grads, lr):
        params, self.state = adam_step(params, grads, self.state, lr)
        return params

    def state_dict(self) -> dict:
        s = self.state
        return {"t": s.t, "m": s.m.copy(), "v": s.v.copy()}

    def load_state_dict(self, d: dict) -> None:
        self.state.t = int(d["t"])
        self.state.m = np.array(d["m"], dtype=np.float64)
        self.state.v = np.array(d["v"], dtype=np.float64)


@REGISTRY.register("optimizer", "sgd", defaults={})
def _build_sgd(cfg: Config, num_params: int):
    return SGD(num_params)


@REGISTRY.register(
    "optimizer", "adam", defaults={"adam_beta1": 0.9, "adam_beta2": 0.98, "adam_eps": 1e-8, "weight_decay": 0.0}
)
def _build_adam(cfg: Config, num_params: int):
    return Adam(num_params, cfg["adam_beta1"], cfg["adam_beta2"], cfg["adam_eps"], cfg["weight_decay"])


@REGISTRY.register("optimizer", "adafactor", defaults={})
def _build_adafactor(cfg: Config, num_params: int):
    raise NotImplementedError("the name 'adafactor' is reserved; no implementation ships")


# -- schedulers --------------------------------------------------------------


@dataclass
class ScheduleConfig:
    kind: str = "inverse_sqrt"
    base_lr: float = 5e-4
    warmup: int = 400
    warmup_init_lr: float = 0.0
    t0: int = 1000
    t_mult: float = 1.0
    eta_min: float = 0.0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base lr must be positive")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if self.t0 < 1 or self.t_mult < 1:
            raise ValueError("need t0 >= 1 and t_mult >= 1")


def _warmup_lr(step, cfg: ScheduleConfig) -> float:
    return cfg.warmup_init_lr + (cfg.base_lr - cfg.warmup_init_lr) * step / cfg.warmup


def inverse_sqrt_lr(step: int, cfg: ScheduleConfig) -> float:
    if step < 1:
        raise ValueError("steps are numbered from 1")
    if cfg.warmup and step <= cfg.warmup:
        return _warmup_lr(step, cfg)
    return cfg.base_lr * math.sqrt(max(cfg.warmup, 1) / step)


def restart_position(t: int, t0: int, t_mult: float) -> tuple[int, int, float]:
    """(cycle index, position in cycle, cycle length) after ``t`` steps."""
    if t_mult == 1:
        return t // t0, t % t0, float(t0)
    i, start, length = 0, 0, float(t0)
    while t >= start + length:
        start += length
        length *= t_mult
        i += 1
    return i, t - start, length


def cosine_restart_lr(t: int, cfg: ScheduleConfig) -> float:
    """LR at 0-based step ``t`` under cosine annealing with warm restarts."""
    _, t_cur, t_i = restart_position(t, cfg.t0, cfg.t_mult)
    return cfg.eta_min + 0.5 * (cfg.base_lr - cfg.eta_min) * (1.0 + math.cos(math.pi * t_cur / t_i))


@dataclass
class Scheduler:
    cfg: ScheduleConfig
    num_updates: int = field(default=0)

    def lr(self, update: int) -> float:
        """LR for the 1-based update number ``update``."""
        c = self.cfg
        if c.kind == "inverse_sqrt":
            return inverse_sqrt_lr(update, c)
        if c.warmup and update <= c.warmup:
            return _warmup_lr(update, c)
        if c.kind == "cosine_restart":
            return cosine_restart_lr(update - 1 - c.warmup, c)
        return c.base_lr

    def next_lr(self) -> float:
        return self.lr(self.num_updates + 1)

    def advance(self) -> None:
        self.num_updates += 1


_SCHED_COMMON = {"lr": 5e-4, "warmup": 400, "warmup_init_lr": 0.0}


def _sched(kind):
    def build(cfg: Config):
        extra = {}
        if kind == "cosine_restart":
            extra = {"t0": cfg["t0"], "t_mult": cfg["t_mult"], "eta_min": cfg["eta_min"]}
        return Scheduler(ScheduleConfig(kind, cfg["lr"], cfg["warmup"], cfg["warmup_init_lr"], **extra))

    return build


REGISTRY.register("scheduler", "inverse_sqrt", _sched("inverse_sqrt"), defaults=_SCHED_COMMON)
REGISTRY.register(
    "scheduler",
    "cosine_restart",
    _sched("cosine_restart"),
    defaults={**_SCHED_COMMON, "warmup": 0, "t0": 1000, "t_mult": 1.0, "eta_min": 0.0},
)
REGISTRY.register("scheduler", "fixed", _sched("fixed"), defaults={**_SCHED_COMMON, "warmup": 0})
