"""Inference: timestep schedules, the Euler sampler and masked conditional sampling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .errors import ContractError, DomainError, SamplingDiverged, ShapeError
from .model import ModelParameters, velocity
from .tensor import make_rng

DEFAULT_STEPS = 32
DEFAULT_ALPHA = 3.0
DEFAULT_K = 0.0625

# field(z, t) -> velocity, with z (n, length, channels) and t of shape (n,)
Field = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SampleSchedule:
    """Increasing grid ``s_0 = 0 < ... < s_N = 1`` traversed noise to data."""

    values: np.ndarray
    kind: str
    param: float

    def __post_init__(self):
        v = self.values
        if v.ndim != 1 or len(v) < 2:
            raise ContractError("a schedule needs at least two points")
        if v[0] != 0.0 or v[-1] != 1.0:
            raise ContractError(f"schedule must start at 0 and end at 1, got {v[0]} .. {v[-1]}")
        if np.any(np.diff(v) <= 0):
            raise ContractError("schedule must be strictly increasing")

    @property
    def steps(self) -> int:
        return len(self.values) - 1

    def __len__(self):
        return len(self.values)


def _check_steps(N):
    if int(N) != N or N < 1:
        raise DomainError(f"number of steps must be an integer >= 1, got {N}")
    return int(N)


def shift_time(t, alpha: float):
    """The SD3-style shift ``1 - alpha*t / (1 + (alpha-1)*t)``."""
    t = np.asarray(t, dtype=np.float64)
    return 1.0 - alpha * t / (1.0 + (alpha - 1.0) * t)


def shifted_schedule(N: int = DEFAULT_STEPS, alpha: float = DEFAULT_ALPHA) -> SampleSchedule:
    """Shifted grid ``s_j = shift_time((N - j) / N)`` for j = 0..N.

    Evaluated in the algebraically equal form ``j / (N + (alpha-1)(N-j))``,
    so alpha = 1 reproduces ``j / N`` bit for bit and both endpoints are exact.
    Larger alpha packs more of the steps near the noise end.
    """
    N = _check_steps(N)
    if not alpha >= 1:
        raise DomainError(f"alpha must be >= 1, got {alpha}")
    j = np.arange(N + 1, dtype=np.float64)
    values = j / (N + (alpha - 1.0) * (N - j))
    return SampleSchedule(values, "shifted", float(alpha))


def uniform_schedule(N: int = DEFAULT_STEPS) -> SampleSchedule:
    N = _check_steps(N)
    return SampleSchedule(np.arange(N + 1, dtype=np.float64) / N, "uniform", 1.0)


def power_schedule(N: int = DEFAULT_STEPS, k: float = DEFAULT_K) -> SampleSchedule:
    """``s_i = (i / N) ** k``; k < 1 concentrates steps near the data end."""
    N = _check_steps(N)
    if not k > 0:
        raise DomainError(f"k must be > 0, got {k}")
    values = (np.arange(N + 1, dtype=np.float64) / N) ** k
    # for tiny k the top points round to 1.0; step them down one ulp at a time
    for i in range(N - 1, 0, -1):
        if values[i] >= values[i + 1]:
            values[i] = np.nextafter(values[i + 1], 0.0)
    return SampleSchedule(values, "power", float(k))


def as_field(model: Union[ModelParameters, Field], chunk: int = 256) -> Field:
    """Wrap trained parameters as ``field(z, t) -> velocity`` evaluated in chunks."""
    if not isinstance(model, ModelParameters):
        return model

    def field(z, t):
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(z),))
        out = np.empty_like(z)
        for start in range(0, len(z), chunk):
            sl = slice(start, start + chunk)
            out[sl] = velocity(model, z[sl], t[sl])
        return out

    return field


def _series_shape(model, series_shape):
    if isinstance(model, ModelParameters):
        cfg = model.config
        shape = (cfg.series_length, cfg.channels)
        if series_shape is not None and tuple(series_shape) != shape:
            raise ShapeError(f"model generates {shape} windows, requested {tuple(series_shape)}")
        return shape
    if series_shape is None:
        raise ContractError("series_shape is required when sampling from a bare field")
    return tuple(series_shape)


def _dtype(model):
    if isinstance(model, ModelParameters):
        return model["in_proj.weight"].dtype
    return np.float32


def sample_unconditional(model, n: int, schedule: SampleSchedule, rng: np.random.Generator,
                         series_shape=None) -> np.ndarray:
    """Integrate ``dz/dt = G(z, t)`` from Gaussian noise with Euler steps.

    Each step is ``z <- z + (s_{i+1} - s_i) * G(z, s_i)``. No clamping is
    applied; callers clip to [-1, 1] at export.
    """
    shape = _series_shape(model, series_shape)
    field = as_field(model)
    z = rng.standard_normal((n,) + shape).astype(_dtype(model))
    if n == 0:
        return z
    s = schedule.values
    for i in range(schedule.steps):
        z = z + float(s[i + 1] - s[i]) * field(z, np.full(n, s[i]))
        if not np.all(np.isfinite(z)):
            raise SamplingDiverged(i)
    return z


@dataclass
class ConditionSpec:
    """Observed values ``y`` and mask (True = observed) for conditional sampling.

    ``y`` and ``mask`` are (length, channels) or (batch, length, channels);
    values of ``y`` at unobserved cells are ignored.
    """

    y: np.ndarray
    mask: np.ndarray
    steps: int = DEFAULT_STEPS
    k: float = DEFAULT_K
    seed: int = 0

    def validate(self, allow_unobserved: bool = False):
        _check_steps(self.steps)
        if not self.k > 0:
            raise DomainError(f"k must be > 0, got {self.k}")
        y = np.asarray(self.y, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if y.ndim == 2:
            y = y[None]
        if mask.ndim == 2 and mask.shape == y.shape[1:]:
            mask = np.broadcast_to(mask, y.shape)
        if mask.shape != y.shape:
            raise ShapeError(f"mask {mask.shape} does not match series {y.shape}")
        per_window = mask.reshape(len(mask), -1)
        if np.any(per_window.all(axis=1)):
            raise ContractError("mask observes every cell of a window; nothing to generate")
        if not allow_unobserved and np.any(~per_window.any(axis=1)):
            raise ContractError("mask observes no cell of a window")
        if not np.all(np.isfinite(y[mask])):
            raise DomainError("observed values must be finite")
        return y, mask


def sample_conditional(model, cond: ConditionSpec, rng: Optional[np.random.Generator] = None,
                       overwrite_observed: bool = True, callback: Optional[Callable] = None,
                       allow_unobserved: bool = False) -> np.ndarray:
    """Fill unobserved cells with the trained unconditional field.

    For i = 0..N-1 with ``t = (i/N) ** k``: draw fresh noise z0, form
    ``z_t = t * z_hat + (1 - t) * z0`` with observed cells replaced by
    ``t * y + (1 - t) * z0``, then jump straight to the data end with one
    Euler step ``z_hat = z_t + (1 - t) * G(z_t, t)``. Observed cells of the
    result are finally set to ``y`` unless ``overwrite_observed`` is False.
    ``callback(i, t, z_t, v)`` sees every iteration. ``allow_unobserved``
    admits windows with no observed cell, which turns the loop into a
    re-noising unconditional sampler.
    """
    y, mask = cond.validate(allow_unobserved)
    squeeze = np.asarray(cond.y).ndim == 2
    _series_shape(model, y.shape[1:])
    field = as_field(model)
    rng = make_rng(cond.seed) if rng is None else rng
    dtype = _dtype(model)
    y = y.astype(dtype)
    times = power_schedule(cond.steps, cond.k).values[:-1]

    z_hat = rng.standard_normal(y.shape).astype(dtype)
    for i, t in enumerate(times):
        t = float(t)
        z0 = rng.standard_normal(y.shape).astype(dtype)
        z_t = t * z_hat + (1 - t) * z0
        z_t[mask] = t * y[mask] + (1 - t) * z0[mask]
        v = field(z_t, np.full(len(z_t), t))
        z_hat = z_t + (1 - t) * v
        if not np.all(np.isfinite(z_hat)):
            raise SamplingDiverged(i)
        if callback is not None:
            callback(i, t, z_t, v)
    if overwrite_observed:
        z_hat[mask] = y[mask]
    return z_hat[0] if squeeze else z_hat


def build_mask(kind: str, length: int, channels: int, rng: Optional[np.random.Generator] = None,
               m: Optional[int] = None, ratio: Optional[float] = None, n: Optional[int] = None) -> np.ndarray:
    """Observation mask (True = observed) of shape (length, channels).

    ``forecast`` observes every channel for the first ``m`` steps;
    ``random_missing`` hides each cell independently with probability
    ``ratio``. With ``n`` a stack of ``n`` masks is returned.
    """
    shape = (length, channels) if n is None else (n, length, channels)
    if kind == "forecast":
        if m is None or not 1 <= m < length:
            raise DomainError(f"forecast needs 1 <= m < length ({length}), got {m}")
        mask = np.zeros(shape, dtype=bool)
        mask[..., :m, :] = True
        return mask
    if kind == "random_missing":
        if ratio is None or not 0 < ratio < 1:
            raise DomainError(f"missing ratio must lie in (0, 1), got {ratio}")
        if rng is None:
            raise ContractError("random_missing masks need an rng")
        return rng.random(shape) >= ratio
    raise DomainError(f"unknown mask kind {kind!r}")
