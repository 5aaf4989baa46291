"""Update rules for source training and test-time adaptation.

Source training uses adaptive-moment estimation; adaptation uses plain
stochastic gradient descent. Both apply decoupled weight decay and are
functional: `step` returns a new parameter dict and never mutates inputs,
so parameters outside the requested name set stay the same objects.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ALGORITHMS = ("adam", "sgd")
SCHEDULES = ("constant", "poly")

# paper values for the ResNet50-scale setup; desk defaults live in configs
PAPER_TRAIN_LR = 2e-5
PAPER_TEST_LR = 1e-3


@dataclass(frozen=True)
class OptimConfig:
    algorithm: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    schedule: str = "constant"
    iterations: int = 1
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    poly_power: float = 0.9

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")

    def lr_at(self, t: int) -> float:
        """Learning rate for 0-based step t."""
        if self.schedule == "constant":
            return self.lr
        frac = min(t, self.iterations) / self.iterations
        return self.lr * (1.0 - frac) ** self.poly_power


class Optimizer:
    """Carries per-parameter moment state; step order is the only input."""

    def __init__(self, cfg: OptimConfig):
        self.cfg = cfg
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, params: dict, grads, names=None) -> dict:
        """One update. `grads` maps name -> array (a GradientSet works too);
        only `names` (default: every graded name) are touched."""
        cfg = self.cfg
        if names is None:
            names = list(grads) if isinstance(grads, dict) else list(params)
        lr = cfg.lr_at(self.t)
        self.t += 1
        out = dict(params)
        for name in names:
            p = params[name]
            g = np.asarray(grads[name], dtype=np.float64)
            if cfg.algorithm == "adam":
                m = self._m.get(name)
                if m is None:
                    m = np.zeros(p.shape)
                    self._m[name] = m
                    self._v[name] = np.zeros(p.shape)
                v = self._v[name]
                m *= cfg.beta1
                m += (1.0 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1.0 - cfg.beta2) * g * g
                mhat = m / (1.0 - cfg.beta1 ** self.t)
                vhat = v / (1.0 - cfg.beta2 ** self.t)
                upd = mhat / (np.sqrt(vhat) + cfg.eps)
            else:
                upd = g
            new = p.astype(np.float64) - lr * upd
            if cfg.weight_decay:
                new -= lr * cfg.weight_decay * p.astype(np.float64)
            out[name] = new.astype(p.dtype)
        return out
