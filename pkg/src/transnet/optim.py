"""Adaptive-moment optimiser with linear warm-up and flat-then-cosine annealing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, Tensor


@dataclass
class OptimConfig:
    base_lr: float = 1e-3
    min_lr: float = 0.0
    warmup_steps: int = 1000
    total_steps: int = 10000
    anneal_point: float = 0.72
    mode: str = "adam"  # or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def learning_rate(step: int, cfg: OptimConfig) -> float:
    """Learning rate at 1-based ``step``.

    Linear ramp over the warm-up, flat until ``anneal_point * total_steps``
    (never before the warm-up ends), then cosine decay reaching ``min_lr``
    at ``total_steps``.
    """
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    start = max(cfg.warmup_steps, int(round(cfg.anneal_point * cfg.total_steps)))
    if step <= start:
        return cfg.base_lr
    if step >= cfg.total_steps:
        return cfg.min_lr
    frac = (step - start) / (cfg.total_steps - start)
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * frac))


class Optimizer:
    def __init__(self, params: list[Tensor], cfg: OptimConfig):
        self.params = list(params)
        self.cfg = cfg
        self.step_index = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> float:
        self.step_index += 1
        return optimizer_step(self.params, self.step_index, self.cfg, self.m, self.v)

    def state(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([self.step_index], dtype=np.float64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.step_index = int(state["step"][0])
        for i in range(len(self.params)):
            self.m[i][...] = state[f"m{i}"]
            self.v[i][...] = state[f"v{i}"]


def optimizer_step(params: list[Tensor], step_index: int, cfg: OptimConfig,
                   m: list[np.ndarray] | None = None, v: list[np.ndarray] | None = None) -> float:
    """Update ``params`` in place from their gradients, then zero the gradients.

    Returns the learning rate used. Moment buffers ``m``/``v`` are required in
    adam mode.
    """
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p!r} has no gradient")
    lr = learning_rate(step_index, cfg)
    if cfg.mode == "sgd":
        for p in params:
            p.data -= lr * p.grad
            p.grad[...] = 0.0
        return lr
    if cfg.mode != "adam":
        raise ValueError(f"unknown optimiser mode {cfg.mode!r}")
    if m is None or v is None:
        raise ContractError("adam mode needs moment buffers")
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** step_index
    c2 = 1.0 - b2 ** step_index
    for p, mi, vi in zip(params, m, v):
        g = p.grad
        mi *= b1
        mi += (1.0 - b1) * g
        vi *= b2
        vi += (1.0 - b2) * g * g
        p.data -= lr * (mi / c1) / (np.sqrt(vi / c2) + cfg.eps)
        p.grad[...] = 0.0
    return lr
