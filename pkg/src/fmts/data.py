"""Synthetic generators, CSV window loading and [-1, 1] min-max scaling."""
from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DomainError, IngestionError, ShapeError

# sines recipe; the ranges are repo constants, not tuned
SINE_FREQ_RANGE = (1.0, 5.0)  # cycles per window
SINE_PHASE_RANGE = (-np.pi, np.pi)
SINE_AMP_RANGE = (0.5, 1.0)

AR_BURN_IN = 100
CONSTANT_CHANNEL_EPS = 1e-8
TRAIN_FRACTION = 0.8


@dataclass
class SeriesBatch:
    """A stack of windows, ``values`` shaped (batch, length, channels)."""

    values: np.ndarray
    channel_names: Optional[list] = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ShapeError(f"series batch must be (batch, length, channels), got shape {v.shape}")
        self.values = v
        if self.channel_names is None:
            self.channel_names = [f"ch{j}" for j in range(v.shape[2])]
        elif len(self.channel_names) != v.shape[2]:
            raise ShapeError(f"{len(self.channel_names)} channel names for {v.shape[2]} channels")
        else:
            self.channel_names = list(self.channel_names)

    def __len__(self):
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def subset(self, idx) -> "SeriesBatch":
        return SeriesBatch(self.values[idx], self.channel_names)


def _check_extents(**extents):
    for name, val in extents.items():
        if int(val) != val or val < 1:
            raise DomainError(f"{name} must be an integer >= 1, got {val}")


def gen_sines(n: int, length: int, channels: int, rng: np.random.Generator) -> SeriesBatch:
    """Sum-free sine windows, one random frequency/phase/amplitude per (sample, channel)."""
    _check_extents(n=n, length=length, channels=channels)
    eta = rng.uniform(*SINE_FREQ_RANGE, size=(n, 1, channels))
    theta = rng.uniform(*SINE_PHASE_RANGE, size=(n, 1, channels))
    amp = rng.uniform(*SINE_AMP_RANGE, size=(n, 1, channels))
    t = np.arange(length, dtype=np.float64)[None, :, None]
    return SeriesBatch(amp * np.sin(2 * np.pi * eta * t / length + theta))


def gen_ar1(n: int, length: int, channels: int, phi: float, rng: np.random.Generator) -> SeriesBatch:
    """Independent stationary AR(1) channels with unit marginal variance."""
    _check_extents(n=n, length=length, channels=channels)
    if not abs(phi) < 1:
        raise DomainError(f"AR(1) needs |phi| < 1, got {phi}")
    noise_std = np.sqrt(1.0 - phi * phi)
    eps = rng.standard_normal((n, AR_BURN_IN + length, channels)) * noise_std
    x = np.empty_like(eps)
    x[:, 0] = eps[:, 0] / noise_std  # start from the stationary law
    for step in range(1, x.shape[1]):
        x[:, step] = phi * x[:, step - 1] + eps[:, step]
    return SeriesBatch(x[:, AR_BURN_IN:])


def window_count(rows: int, length: int, stride: int) -> int:
    """Number of windows: ``floor((rows - length) / stride) + 1`` (0 if rows < length)."""
    if rows < length:
        return 0
    return (rows - length) // stride + 1


def read_csv_table(path) -> tuple:
    """Parse a headed numeric CSV into (channel names, (rows, channels) float64 array)."""
    if not os.path.exists(path):
        raise IngestionError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        if not header or all(h == "" for h in header):
            raise IngestionError(f"{path}: missing header row")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}: row {lineno} has {len(row)} cells, header has {len(header)}")
            vals = []
            for col, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise IngestionError(
                        f"{path}: row {lineno}, column {col + 1} ({header[col]!r}): cannot parse {cell!r}"
                    ) from None
                if not np.isfinite(v):
                    raise IngestionError(f"{path}: row {lineno}, column {col + 1} ({header[col]!r}): non-finite value")
                vals.append(v)
            rows.append(vals)
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return header, data


def make_windows(table: np.ndarray, length: int, stride: int = 1) -> np.ndarray:
    rows = table.shape[0]
    count = window_count(rows, length, stride)
    starts = np.arange(count) * stride
    return np.stack([table[s:s + length] for s in starts]) if count else np.empty((0, length, table.shape[1]))


def load_csv_windows(path, length: int, stride: int = 1) -> SeriesBatch:
    """Sliding windows of ``length`` rows every ``stride`` rows, in file order."""
    _check_extents(length=length, stride=stride)
    names, table = read_csv_table(path)
    if table.shape[0] < length:
        raise ContractError(f"{path}: {table.shape[0]} data rows, need at least {length} for one window")
    return SeriesBatch(make_windows(table, length, stride), names)


@dataclass
class NormalizationState:
    """Per-channel min and max taken from the training split."""

    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=np.float64).reshape(-1)
        self.maximum = np.asarray(self.maximum, dtype=np.float64).reshape(-1)
        if self.minimum.shape != self.maximum.shape:
            raise ShapeError("min and max must have one entry per channel")
        if np.any(self.maximum <= self.minimum):
            raise ContractError("normalization needs max > min for every channel")

    @property
    def channels(self) -> int:
        return len(self.minimum)

    @classmethod
    def fit(cls, values: np.ndarray) -> "NormalizationState":
        values = np.asarray(values, dtype=np.float64)
        if values.size == 0:
            raise ContractError("cannot fit normalization on an empty batch")
        flat = values.reshape(-1, values.shape[-1])
        lo, hi = flat.min(axis=0), flat.max(axis=0)
        const = hi <= lo
        if np.any(const):
            warnings.warn(f"constant channel(s) {np.flatnonzero(const).tolist()} widened by {CONSTANT_CHANNEL_EPS}",
                          UserWarning, stacklevel=3)
            lo = np.where(const, lo - CONSTANT_CHANNEL_EPS / 2, lo)
            hi = np.where(const, hi + CONSTANT_CHANNEL_EPS / 2, hi)
            # at large magnitudes the epsilon is below one ulp
            stuck = hi <= lo
            lo = np.where(stuck, np.nextafter(lo, -np.inf), lo)
            hi = np.where(stuck, np.nextafter(hi, np.inf), hi)
        return cls(lo, hi)


def _values(batch):
    return batch.values if isinstance(batch, SeriesBatch) else np.asarray(batch, dtype=np.float64)


def normalize(batch, state: Optional[NormalizationState] = None):
    """Map each channel to ``2 (x - min) / (max - min) - 1``.

    Without ``state`` the statistics are fitted on ``batch`` (training split).
    Held-out data must pass the training state; values outside the fitted
    range land outside [-1, 1] and are left there.
    """
    x = _values(batch)
    if state is None:
        state = NormalizationState.fit(x)
    elif x.shape[-1] != state.channels:
        raise ContractError(f"batch has {x.shape[-1]} channels, normalization state has {state.channels}")
    out = 2.0 * (x - state.minimum) / (state.maximum - state.minimum) - 1.0
    if isinstance(batch, SeriesBatch):
        out = SeriesBatch(out, batch.channel_names)
    return out, state


def denormalize(batch, state: NormalizationState):
    x = _values(batch)
    if x.shape[-1] != state.channels:
        raise ContractError(f"batch has {x.shape[-1]} channels, normalization state has {state.channels}")
    out = (x + 1.0) * 0.5 * (state.maximum - state.minimum) + state.minimum
    return SeriesBatch(out, batch.channel_names) if isinstance(batch, SeriesBatch) else out


def train_test_split(batch: SeriesBatch, rng: np.random.Generator, train_fraction: float = TRAIN_FRACTION):
    """Shuffle window indices and cut at ``floor(train_fraction * n)``."""
    if not 0 < train_fraction < 1:
        raise DomainError(f"train fraction must lie in (0, 1), got {train_fraction}")
    order = rng.permutation(len(batch))
    cut = int(np.floor(train_fraction * len(batch)))
    return batch.subset(np.sort(order[:cut])), batch.subset(np.sort(order[cut:]))


def _fmt(v) -> str:
    return repr(float(v))


def write_windows_long(path, batch: SeriesBatch):
    """Long form: ``window,step,<channels...>`` with one row per time step."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "step"] + batch.channel_names)
        for i, win in enumerate(batch.values):
            for s, row in enumerate(win):
                w.writerow([i, s] + [_fmt(v) for v in row])


def read_windows_long(path) -> SeriesBatch:
    names, table = read_csv_table(path)
    if names[:2] != ["window", "step"]:
        raise IngestionError(f"{path}: long-form files start with 'window,step' columns")
    if table.shape[0] == 0:
        return SeriesBatch(np.empty((0, 0, len(names) - 2)), names[2:])
    win = table[:, 0].astype(int)
    step = table[:, 1].astype(int)
    n, length = win.max() + 1, step.max() + 1
    if table.shape[0] != n * length:
        raise IngestionError(f"{path}: expected {n} windows of {length} steps, found {table.shape[0]} rows")
    out = np.full((n, length, len(names) - 2), np.nan)
    out[win, step] = table[:, 2:]
    if np.isnan(out).any():
        raise IngestionError(f"{path}: missing (window, step) rows")
    return SeriesBatch(out, names[2:])


def write_windows_split(directory, batch: SeriesBatch, prefix: str = "window") -> list:
    """One CSV per window, named ``<prefix>_<index>.csv``; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    width = max(4, len(str(max(len(batch) - 1, 0))))
    paths = []
    for i, win in enumerate(batch.values):
        path = os.path.join(directory, f"{prefix}_{i:0{width}d}.csv")
        write_table(path, batch.channel_names, win)
        paths.append(path)
    return paths


def write_table(path, names: Sequence[str], table: np.ndarray):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(names))
        for row in table:
            w.writerow([_fmt(v) for v in row])
