"""Grouped SGD with coupled weight decay and a cosine-annealed learning rate."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class MissingGradientError(RuntimeError):
    pass


@dataclass
class ParamGroup:
    names: tuple
    lr_scale: float = 1.0
    weight_decay: float = 0.0

    def __post_init__(self):
        self.names = tuple(self.names)


@dataclass(frozen=True)
class CosineSchedule:
    eta_max: float
    total_steps: int
    eta_min: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if self.eta_min > self.eta_max:
            raise ValueError("eta_min must not exceed eta_max")


def lr_at(schedule: CosineSchedule, step: int) -> float:
    if not (0 <= step <= schedule.total_steps):
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step == 0:
        return schedule.eta_max
    if step == schedule.total_steps:
        return schedule.eta_min
    cos = math.cos(math.pi * step / schedule.total_steps)
    return schedule.eta_min + 0.5 * (schedule.eta_max - schedule.eta_min) * (1.0 + cos)


def feature_classifier_groups(model, kappa: float = 1.0, weight_decay_f: float = 0.0,
                              weight_decay_g: float = 0.0) -> list:
    """Extractor group with learning rate divided by ``kappa``, classifier at full rate."""
    if kappa < 1:
        raise ValueError(f"kappa must be >= 1, got {kappa}")
    return [
        ParamGroup(model.feature_names, lr_scale=1.0 / kappa, weight_decay=weight_decay_f),
        ParamGroup(model.classifier_names, lr_scale=1.0, weight_decay=weight_decay_g),
    ]


class SGD:
    """``w <- w - lr * lr_scale * v`` with ``v = momentum * v + (grad + wd * w)``.

    With ``momentum == 0`` this is exactly ``w - lr * lr_scale * (grad + wd * w)``.
    """

    def __init__(self, params: dict, groups: Sequence[ParamGroup], momentum: float = 0.0):
        if not (0.0 <= momentum < 1.0):
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        owner = {}
        for gi, g in enumerate(groups):
            for n in g.names:
                if n in owner:
                    raise ValueError(f"parameter {n!r} is in more than one group")
                if n not in params:
                    raise ValueError(f"group names unknown parameter {n!r}")
                owner[n] = gi
        missing = set(params) - set(owner)
        if missing:
            raise ValueError(f"parameters without a group: {sorted(missing)}")
        self.params = params
        self.groups = list(groups)
        self.momentum = momentum
        self.buffers: dict = {}

    def step(self, base_lr: float) -> None:
        for g in self.groups:
            lr = base_lr * g.lr_scale
            for n in g.names:
                p = self.params[n]
                if p.grad is None:
                    raise MissingGradientError(f"no gradient for {n!r}")
                d = p.grad
                if g.weight_decay:
                    d = d + g.weight_decay * p.data
                if self.momentum:
                    buf = self.buffers.get(n)
                    buf = d.copy() if buf is None else self.momentum * buf + d
                    self.buffers[n] = buf
                    d = buf
                p.data = p.data - lr * d


def sgd_step(params: dict, groups: Sequence[ParamGroup], base_lr: float, momentum: float = 0.0,
             state: dict | None = None) -> dict:
    """Functional single step; pass the returned momentum state into the next call."""
    opt = SGD(params, groups, momentum)
    if state:
        opt.buffers = {n: np.array(b) for n, b in state.items()}
    opt.step(base_lr)
    return opt.buffers
