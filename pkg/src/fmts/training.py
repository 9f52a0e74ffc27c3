"""Rectified-flow training: timestep sampling, interpolation and the loop."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError, TrainingDiverged
from .model import ModelParameters, forward
from .optim import AdamConfig, OptimizerState, adam_step

T_SAMPLING_MODES = ("logit_normal", "uniform")

# open-interval guards for sample_t
_T_LOW = np.nextafter(0.0, 1.0)
_T_HIGH = np.nextafter(1.0, 0.0)


@dataclass
class TrainConfig:
    batch_size: int = 64
    total_steps: int = 1000
    t_sampling: str = "logit_normal"
    logit_normal_mean: float = 0.0
    logit_normal_std: float = 1.0
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.total_steps < 0:
            raise ConfigError("train.total_steps must be >= 0")
        if self.t_sampling not in T_SAMPLING_MODES:
            raise ConfigError(f"train.t_sampling must be one of {T_SAMPLING_MODES}, got {self.t_sampling!r}")
        if not self.logit_normal_std > 0:
            raise ConfigError("train.logit_normal_std must be > 0")
        if self.checkpoint_every < 0:
            raise ConfigError("train.checkpoint_every must be >= 0")
        self.optimizer.validate()
        return self


@dataclass
class TrainReport:
    losses: list
    wall_ms: list
    params: ModelParameters
    optimizer: Optional[OptimizerState] = None
    rng_state: Optional[dict] = None  # bit-generator states of the shuffle and noise streams

    @property
    def steps(self) -> int:
        return len(self.losses)


def sample_t(mode: str, rng: np.random.Generator, batch: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Per-sample training times, strictly inside (0, 1).

    ``logit_normal`` draws ``sigmoid(u)`` with ``u ~ N(mean, std)``, which
    puts most of the mass around t = 0.5; ``uniform`` draws U(0, 1).
    """
    if mode == "logit_normal":
        u = rng.normal(mean, std, size=batch)
        t = 0.5 * (1.0 + np.tanh(0.5 * u))
    elif mode == "uniform":
        t = rng.random(batch)
    else:
        raise ConfigError(f"unknown t sampling mode {mode!r}")
    return np.clip(t, _T_LOW, _T_HIGH)


def interpolate(z0, z1, t) -> np.ndarray:
    """Straight-line path ``t * z1 + (1 - t) * z0`` with one t per sample."""
    z0 = np.asarray(z0)
    z1 = np.asarray(z1)
    if z0.shape != z1.shape:
        raise ShapeError(f"z0 {z0.shape} and z1 {z1.shape} differ")
    t = np.asarray(t, dtype=z1.dtype)
    if t.ndim == 0:
        t = np.full(z1.shape[0], t)
    if t.shape != (z1.shape[0],):
        raise ShapeError(f"need one t per sample, got {t.shape} for batch {z1.shape[0]}")
    t = t.reshape((-1,) + (1,) * (z1.ndim - 1))
    return t * z1 + (1 - t) * z0


def flow_matching_loss(params, z0, z1, t, velocity_fn: Callable = forward) -> T.Tensor:
    """Mean squared error between the predicted velocity and ``z1 - z0``."""
    z_t = interpolate(z0, z1, t)
    pred = velocity_fn(params, z_t, t)
    return T.mse_loss(pred, T.Tensor(z1 - z0, dtype=z_t.dtype))


def fm_loss(params: ModelParameters, z1, rng: np.random.Generator, config: TrainConfig,
            velocity_fn: Callable = forward):
    """Draw noise and times for a data batch and return ``(loss, grads)``.

    ``grads`` maps parameter names to arrays. ``velocity_fn`` defaults to the
    transformer; tests substitute closed-form fields through it.
    """
    dtype = params["in_proj.weight"].dtype
    z1 = np.asarray(z1, dtype=dtype)
    z0 = rng.standard_normal(z1.shape).astype(dtype)
    t = sample_t(config.t_sampling, rng, z1.shape[0], config.logit_normal_mean, config.logit_normal_std)
    params.zero_grad()
    with T.precision(dtype), T.GradTape() as tape:
        loss = flow_matching_loss(params, z0, z1, t, velocity_fn)
    value = float(loss.item())
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite flow-matching loss ({value})")
    if loss.requires_grad:
        tape.backward(loss)
    return value, params.grads()


def train(params: ModelParameters, data, config: TrainConfig,
          checkpoint_fn: Optional[Callable] = None,
          log_fn: Optional[Callable] = None) -> TrainReport:
    """Run ``config.total_steps`` Adam steps over shuffled minibatches of ``data``.

    ``data`` is an array (n, length, channels) already scaled to [-1, 1].
    ``checkpoint_fn(step, params, optimizer_state)`` fires every
    ``config.checkpoint_every`` steps; ``log_fn(step, loss, wall_ms)`` after
    every step. A non-finite loss or gradient raises TrainingDiverged.
    """
    config.validate()
    data = np.asarray(data)
    cfg = params.config
    if data.ndim != 3 or len(data) == 0:
        raise ContractError("training data must be a non-empty (n, length, channels) array")
    if data.shape[1:] != (cfg.series_length, cfg.channels):
        raise ShapeError(f"data windows {data.shape[1:]} do not match model ({cfg.series_length}, {cfg.channels})")
    shuffle_rng, noise_rng = T.split_rng(T.make_rng(config.seed), 2)
    opt = OptimizerState.create(params.tensors, config.optimizer)
    batch = min(config.batch_size, len(data))
    order = shuffle_rng.permutation(len(data))
    cursor = 0
    losses, wall = [], []
    for step in range(1, config.total_steps + 1):
        start = time.perf_counter()
        if cursor + batch > len(order):
            order = shuffle_rng.permutation(len(data))
            cursor = 0
        idx = order[cursor:cursor + batch]
        cursor += batch
        try:
            loss, grads = fm_loss(params, data[idx], noise_rng, config)
            params = params.replace(adam_step(params.tensors, grads, opt))
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"step {step}: {exc}") from exc
        ms = (time.perf_counter() - start) * 1e3
        losses.append(loss)
        wall.append(ms)
        if log_fn is not None:
            log_fn(step, loss, ms)
        if checkpoint_fn is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            checkpoint_fn(step, params, opt)
    rng_state = {"shuffle": shuffle_rng.bit_generator.state, "noise": noise_rng.bit_generator.state}
    return TrainReport(losses=losses, wall_ms=wall, params=params, optimizer=opt, rng_state=rng_state)
