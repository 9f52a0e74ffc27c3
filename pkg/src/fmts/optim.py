"""Adam with bias correction, global-norm clipping and linear warmup."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .errors import ConfigError, ShapeError, TrainingDiverged
from .tensor import Tensor


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.96
    eps: float = 1e-8
    clip_norm: Optional[float] = 1.0
    warmup_steps: int = 100

    def validate(self):
        if not self.lr > 0:
            raise ConfigError("optimizer lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("optimizer betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigError("optimizer eps must be > 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be > 0 or None")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        return self


@dataclass
class OptimizerState:
    config: AdamConfig
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def create(cls, params: Mapping[str, Tensor], config: AdamConfig | None = None):
        config = (config or AdamConfig()).validate()
        return cls(
            config=config,
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )

    def learning_rate(self, step: int) -> float:
        cfg = self.config
        if cfg.warmup_steps and step < cfg.warmup_steps:
            return cfg.lr * step / cfg.warmup_steps
        return cfg.lr


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float):
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns the (possibly) rescaled mapping and the norm before clipping.
    """
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    factor = max_norm / norm
    return {k: g * g.dtype.type(factor) for k, g in grads.items()}, norm


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState):
    """Apply one Adam update and return the new parameter mapping.

    ``state`` is advanced in place; the input tensors are left untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    cfg = state.config
    if cfg.clip_norm is not None:
        grads, _ = clip_by_global_norm(grads, cfg.clip_norm)
    state.step += 1
    t = state.step
    lr = state.learning_rate(t)
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    updated = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = p
            continue
        m = state.m[name] = cfg.beta1 * state.m[name] + (1 - cfg.beta1) * g
        v = state.v[name] = cfg.beta2 * state.v[name] + (1 - cfg.beta2) * g * g
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        updated[name] = Tensor((p.data - step).astype(p.dtype, copy=False), requires_grad=p.requires_grad, dtype=p.dtype)
    return updated
