"""Evaluation battery: post-hoc GRU scores, correlation gap, feature Frechet distance, PCA."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .data import SeriesBatch
from .errors import ContractError, DegenerateDataError, MetricError, ShapeError
from .optim import AdamConfig, OptimizerState, adam_step

HIDDEN = 32
TRAIN_STEPS = 500
LEARNING_RATE = 1e-3
BATCH = 64
REPEATS = 3
MIN_WINDOWS = 64
CORR_SCALE = 10.0

FEATURE_FILTERS = 32
FEATURE_KERNEL = 5
FEATURE_STAT_CHANNELS = 8  # summary statistics are kept for this many channels
FEATURE_BANK_SEED = 0


@dataclass
class MetricReport:
    name: str
    value: float
    std: Optional[float] = None
    repeats: int = 1
    seeds: list = field(default_factory=list)

    def __post_init__(self):
        if self.repeats < 1:
            raise ContractError("a metric report needs repeats >= 1")
        if (self.std is None) != (self.repeats == 1):
            raise ContractError("std is reported exactly when repeats > 1")
        for v in (self.value, self.std):
            if v is not None and not (np.isfinite(v) and v >= 0):
                raise MetricError(f"{self.name}: metric values must be finite and >= 0, got {v}")

    @classmethod
    def from_values(cls, name, values, seeds=()):
        values = np.asarray(values, dtype=np.float64)
        std = float(values.std(ddof=1)) if len(values) > 1 else None
        return cls(name, float(values.mean()), std, len(values), [int(s) for s in seeds])

    def to_kv(self) -> str:
        std = "" if self.std is None else repr(self.std)
        seeds = ",".join(str(s) for s in self.seeds)
        return f"name={self.name}\nmean={self.value!r}\nstd={std}\nrepeats={self.repeats}\nseeds={seeds}\n"

    def to_row(self) -> str:
        std = "" if self.std is None else f"{self.std:.6f}"
        seeds = ",".join(str(s) for s in self.seeds)
        return f"{self.name}\t{self.value:.6f}\t{std}\t{self.repeats}\t{seeds}"

    @classmethod
    def from_kv(cls, text: str) -> "MetricReport":
        kv = dict(line.split("=", 1) for line in text.strip().splitlines())
        std = float(kv["std"]) if kv["std"] else None
        seeds = [int(s) for s in kv["seeds"].split(",") if s]
        return cls(kv["name"], float(kv["mean"]), std, int(kv["repeats"]), seeds)


TABLE_HEADER = "metric\tmean\tstd\trepeats\tseeds"


def format_table(reports) -> str:
    return "\n".join([TABLE_HEADER] + [r.to_row() for r in reports]) + "\n"


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, SeriesBatch) else np.asarray(x, dtype=np.float64)


def _check_pair(real, fake, min_windows=0):
    if real.ndim != 3 or fake.ndim != 3:
        raise ShapeError("metric inputs must be (windows, length, channels)")
    if real.shape[1:] != fake.shape[1:]:
        raise ContractError(f"real windows {real.shape[1:]} and fake windows {fake.shape[1:]} differ")
    if min(len(real), len(fake)) < min_windows:
        raise ContractError(f"need at least {min_windows} windows per set, got {len(real)} and {len(fake)}")
    if not (np.all(np.isfinite(real)) and np.all(np.isfinite(fake))):
        raise MetricError("metric inputs contain non-finite values")


def _canonical(x: np.ndarray) -> np.ndarray:
    """Sort windows lexicographically so scores do not depend on input order."""
    flat = x.reshape(len(x), -1)
    return x[np.lexsort(flat.T[::-1])]


def _repeat_seeds(rng, repeats):
    if repeats < 1:
        raise ContractError("repeats must be >= 1")
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=repeats)]


# --------------------------------------------------------------------------
# GRU


def gru_layer(x, w_ih, w_hh, b_ih, b_hh) -> T.Tensor:
    """Run a GRU over ``x`` (B, L, I) from a zero state and return all hidden states (B, L, H).

    Gate blocks in the 3H columns are ordered reset, update, candidate:
    ``r = s(x Wr + h Ur)``, ``u = s(x Wu + h Uu)``, ``c = tanh(x Wc + r * (h Uc))``,
    ``h' = (1 - u) * c + u * h`` (biases on both paths). Fused into one op with
    backpropagation through time written out by hand.
    """
    x, w_ih, w_hh, b_ih, b_hh = (T._as_tensor(a) for a in (x, w_ih, w_hh, b_ih, b_hh))
    B, L, I = x.shape
    H = w_hh.shape[0]
    if w_ih.shape != (I, 3 * H) or w_hh.shape != (H, 3 * H) or b_ih.shape != (3 * H,) or b_hh.shape != (3 * H,):
        raise ShapeError("GRU weight shapes do not match input width and hidden size")
    xd, Wi, Wh = x.data, w_ih.data, w_hh.data
    gi = (xd.reshape(B * L, I) @ Wi + b_ih.data).reshape(B, L, 3 * H)
    h = np.zeros((B, H), dtype=gi.dtype)
    hs = np.empty((B, L, H), dtype=gi.dtype)
    r_all, u_all, c_all, hn_all = (np.empty((B, L, H), dtype=gi.dtype) for _ in range(4))
    for t in range(L):
        gh = h @ Wh + b_hh.data
        r = 0.5 * (1 + np.tanh(0.5 * (gi[:, t, :H] + gh[:, :H])))
        u = 0.5 * (1 + np.tanh(0.5 * (gi[:, t, H:2 * H] + gh[:, H:2 * H])))
        c = np.tanh(gi[:, t, 2 * H:] + r * gh[:, 2 * H:])
        h = (1 - u) * c + u * h
        r_all[:, t], u_all[:, t], c_all[:, t], hn_all[:, t] = r, u, c, gh[:, 2 * H:]
        hs[:, t] = h

    def backward(g):
        dgi = np.empty((B, L, 3 * H), dtype=gi.dtype)
        dWh = np.zeros_like(Wh)
        dbh = np.zeros(3 * H, dtype=gi.dtype)
        dh_next = np.zeros((B, H), dtype=gi.dtype)
        for t in reversed(range(L)):
            r, u, c, hn = r_all[:, t], u_all[:, t], c_all[:, t], hn_all[:, t]
            h_prev = hs[:, t - 1] if t else np.zeros((B, H), dtype=gi.dtype)
            dh = g[:, t] + dh_next
            dc = dh * (1 - u) * (1 - c * c)
            du = dh * (h_prev - c) * u * (1 - u)
            dr = dc * hn * r * (1 - r)
            dgi[:, t, :H] = dr
            dgi[:, t, H:2 * H] = du
            dgi[:, t, 2 * H:] = dc
            dgh = np.concatenate([dr, du, dc * r], axis=1)
            dWh += h_prev.T @ dgh
            dbh += dgh.sum(axis=0)
            dh_next = dh * u + dgh @ Wh.T
        flat = dgi.reshape(B * L, 3 * H)
        dx = (flat @ Wi.T).reshape(B, L, I)
        dWi = xd.reshape(B * L, I).T @ flat
        return dx, dWi, dWh, flat.sum(axis=0), dbh

    return T.apply_op(hs, (x, w_ih, w_hh, b_ih, b_hh), backward)


def init_gru(in_dim: int, out_dim: int, rng, hidden: int = HIDDEN, layers: int = 2) -> dict:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) init for a stacked GRU plus a linear head."""
    bound = 1.0 / np.sqrt(hidden)
    dtype = T.get_default_dtype()
    params = {}

    def draw(shape):
        return T.Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

    for layer in range(layers):
        width = in_dim if layer == 0 else hidden
        params[f"gru{layer}.w_ih"] = draw((width, 3 * hidden))
        params[f"gru{layer}.w_hh"] = draw((hidden, 3 * hidden))
        params[f"gru{layer}.b_ih"] = draw((3 * hidden,))
        params[f"gru{layer}.b_hh"] = draw((3 * hidden,))
    params["head.weight"] = draw((hidden, out_dim))
    params["head.bias"] = draw((out_dim,))
    return params


def gru_forward(params: dict, x) -> T.Tensor:
    """Head applied to every hidden state of the top layer: (B, L, out)."""
    h = T._as_tensor(x)
    layer = 0
    while f"gru{layer}.w_ih" in params:
        h = gru_layer(h, *(params[f"gru{layer}.{k}"] for k in ("w_ih", "w_hh", "b_ih", "b_hh")))
        layer += 1
    return h @ params["head.weight"] + params["head.bias"]


def _fit(params, loss_fn, n, rng, steps, batch):
    opt = OptimizerState.create(params, AdamConfig(lr=LEARNING_RATE, beta2=0.999, clip_norm=None, warmup_steps=0))
    batch = min(batch, n)
    for _ in range(steps):
        idx = rng.choice(n, size=batch, replace=False)
        for p in params.values():
            p.zero_grad()
        with T.GradTape() as tape:
            loss = loss_fn(params, idx)
        tape.backward(loss)
        grads = {k: p.grad for k, p in params.items()}
        params = adam_step(params, grads, opt)
    return params


# --------------------------------------------------------------------------
# scores


def discriminative_score(real, fake, rng: np.random.Generator, repeats: int = REPEATS,
                         steps: int = TRAIN_STEPS, batch: int = BATCH) -> MetricReport:
    """``|accuracy - 0.5|`` of a GRU classifier separating real from fake windows.

    Each set is split 80/20 into train and test windows; when both sets have
    the same size they share one index permutation, so identical sets keep
    every window and its twin on the same side of the split. The classifier
    reads the head output at the last time step as a logit.
    """
    real, fake = _values(real), _values(fake)
    _check_pair(real, fake, MIN_WINDOWS)
    if abs(len(real) - len(fake)) > 0.1 * max(len(real), len(fake)):
        raise ContractError(f"class sizes {len(real)} and {len(fake)} differ by more than 10%; balance first")
    dtype = T.get_default_dtype()
    x = np.concatenate([_canonical(real), _canonical(fake)]).astype(dtype)
    y = np.concatenate([np.ones(len(real)), np.zeros(len(fake))]).astype(dtype)
    seeds = _repeat_seeds(rng, repeats)
    scores = []
    for seed in seeds:
        r = T.make_rng(seed)
        perm_r = r.permutation(len(real))
        perm_f = perm_r if len(fake) == len(real) else r.permutation(len(fake))
        cut_r, cut_f = int(0.8 * len(real)), int(0.8 * len(fake))
        train = np.concatenate([perm_r[:cut_r], len(real) + perm_f[:cut_f]])
        test = np.concatenate([perm_r[cut_r:], len(real) + perm_f[cut_f:]])
        params = init_gru(x.shape[2], 1, r)

        def loss_fn(p, idx):
            out = gru_forward(p, x[train[idx]])
            last = T.split(out, [out.shape[1] - 1, 1], axis=1)[1] if out.shape[1] > 1 else out
            return T.bce_with_logits(T.reshape(last, (len(idx),)), T.Tensor(y[train[idx]]))

        params = _fit(params, loss_fn, len(train), r, steps, batch)
        logits = gru_forward(params, x[test]).data[:, -1, 0]
        acc = float(np.mean((logits > 0) == (y[test] > 0.5)))
        scores.append(abs(acc - 0.5))
    return MetricReport.from_values("discriminative", scores, seeds)


def predictive_score(real, fake, rng: np.random.Generator, repeats: int = REPEATS,
                     steps: int = TRAIN_STEPS, batch: int = BATCH) -> MetricReport:
    """MAE on real windows of a next-step GRU predictor trained on fake windows."""
    real, fake = _values(real), _values(fake)
    _check_pair(real, fake)
    if real.shape[1] < 2:
        raise ContractError("predictive score needs windows of length >= 2")
    dtype = T.get_default_dtype()
    fake = _canonical(fake).astype(dtype)
    real = real.astype(dtype)
    seeds = _repeat_seeds(rng, repeats)
    scores = []
    for seed in seeds:
        r = T.make_rng(seed)
        params = init_gru(fake.shape[2], fake.shape[2], r)

        def loss_fn(p, idx):
            win = fake[idx]
            return T.mse_loss(gru_forward(p, win[:, :-1]), T.Tensor(win[:, 1:]))

        params = _fit(params, loss_fn, len(fake), r, steps, batch)
        pred = gru_forward(params, real[:, :-1]).data
        scores.append(float(np.mean(np.abs(pred - real[:, 1:]))))
    return MetricReport.from_values("predictive", scores, seeds)


def _correlation(x: np.ndarray, which: str) -> np.ndarray:
    flat = x.reshape(-1, x.shape[2]).astype(np.float64)
    centered = flat - flat.mean(axis=0)
    scale = np.sqrt(np.sum(centered * centered, axis=0))
    if np.any(scale == 0):
        raise DegenerateDataError(f"{which} channel {int(np.flatnonzero(scale == 0)[0])} is constant; correlation undefined")
    c = (centered.T @ centered) / np.outer(scale, scale)
    return np.clip(c, -1.0, 1.0)


def correlational_score(real, fake) -> MetricReport:
    """Mean absolute gap between channel correlation matrices (strict upper triangle), times 10."""
    real, fake = _values(real), _values(fake)
    _check_pair(real, fake)
    if real.shape[2] < 2:
        raise ContractError("correlational score needs at least two channels")
    iu = np.triu_indices(real.shape[2], k=1)
    gap = np.abs(_correlation(real, "real")[iu] - _correlation(fake, "fake")[iu])
    return MetricReport("correlational", float(CORR_SCALE * gap.mean()))


# --------------------------------------------------------------------------
# feature Frechet distance


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.cov))):
            raise MetricError("feature statistics are not finite")
        if self.cov.shape != (len(self.mean), len(self.mean)):
            raise ShapeError("covariance does not match mean dimension")
        scale = max(1.0, float(np.abs(self.cov).max()))
        if np.abs(self.cov - self.cov.T).max() > 1e-6 * scale:
            raise MetricError("covariance is not symmetric")


def gaussian_stats(features: np.ndarray) -> FeatureStats:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) < 2:
        raise ContractError("need a (n >= 2, dim) feature matrix")
    mu = f.mean(axis=0)
    centered = f - mu
    cov = centered.T @ centered / (len(f) - 1)
    return FeatureStats(mu, 0.5 * (cov + cov.T))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`` for Gaussian fits.

    The cross term is evaluated as ``Tr sqrt(sqrt(S_a) S_b sqrt(S_a))``, a PSD
    form with the same eigenvalues as ``S_a S_b``; negative eigenvalues from
    rounding are clipped to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ShapeError("feature dimensions differ")
    ra = _psd_sqrt(a.cov)
    w = np.linalg.eigvalsh(ra @ b.cov @ ra)
    cross = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    diff = a.mean - b.mean
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    if not np.isfinite(d):
        raise MetricError("Frechet distance is not finite")
    return max(d, 0.0)


def _summary_stats(x: np.ndarray) -> np.ndarray:
    """Eight statistics per channel: mean, std, min, max, first, last, mean |diff|, lag-1 autocorrelation."""
    mean = x.mean(axis=1)
    centered = x - mean[:, None]
    var = (centered**2).mean(axis=1)
    if x.shape[1] > 1:
        absdiff = np.abs(np.diff(x, axis=1)).mean(axis=1)
        lag = (centered[:, 1:] * centered[:, :-1]).mean(axis=1)
        ac = np.where(var > 0, lag / np.where(var > 0, var, 1.0), 0.0)
    else:
        absdiff = ac = np.zeros_like(mean)
    stats = np.stack([mean, np.sqrt(var), x.min(axis=1), x.max(axis=1), x[:, 0], x[:, -1], absdiff, ac], axis=2)
    n, d = stats.shape[:2]
    out = np.zeros((n, FEATURE_STAT_CHANNELS, 8))
    keep = min(d, FEATURE_STAT_CHANNELS)
    out[:, :keep] = stats[:, :keep]
    return out.reshape(n, -1)


def window_features(x: np.ndarray) -> np.ndarray:
    """Fixed random-convolution features (mean and max pooled) plus summary statistics.

    The filter bank depends only on the channel count, so two sets with the
    same window shape are always embedded identically.
    """
    x = np.asarray(x, dtype=np.float64)
    n, L, d = x.shape
    bank_rng = T.make_rng([FEATURE_BANK_SEED, d])
    w = bank_rng.standard_normal((FEATURE_KERNEL * d, FEATURE_FILTERS)) / np.sqrt(FEATURE_KERNEL * d)
    b = bank_rng.uniform(-0.5, 0.5, size=FEATURE_FILTERS)
    pad = FEATURE_KERNEL // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, FEATURE_KERNEL, axis=1)[:, :L]  # (n, L, d, K)
    cols = cols.transpose(0, 1, 3, 2).reshape(n, L, FEATURE_KERNEL * d)
    act = np.tanh(cols @ w + b)
    return np.concatenate([act.mean(axis=1), act.max(axis=1), _summary_stats(x)], axis=1)


def feature_fid(real, fake, rng: Optional[np.random.Generator] = None) -> MetricReport:
    """Frechet distance between Gaussian fits of :func:`window_features`.

    A surrogate for a learned contextual embedding: values are only
    comparable with each other, not with published figures. ``rng`` is
    accepted for interface symmetry; the embedding is fixed.
    """
    real, fake = _values(real), _values(fake)
    _check_pair(real, fake, MIN_WINDOWS)
    d = frechet_distance(gaussian_stats(window_features(real)), gaussian_stats(window_features(fake)))
    return MetricReport("feature_fid", d)


# --------------------------------------------------------------------------
# PCA


@dataclass
class PCAProjection:
    real: np.ndarray
    fake: np.ndarray
    components: np.ndarray  # (2, length * channels)
    center: np.ndarray
    explained_variance: np.ndarray  # all eigenvalues of the real covariance, descending

    @property
    def explained_ratio(self) -> np.ndarray:
        return self.explained_variance[:2] / self.explained_variance.sum()


def pca_project(real, fake) -> PCAProjection:
    """Project both sets onto the top two principal axes of the real windows."""
    real, fake = _values(real), _values(fake)
    _check_pair(real, fake)
    if len(real) < 3:
        raise ContractError("PCA needs at least 3 real windows")
    r = real.reshape(len(real), -1).astype(np.float64)
    f = fake.reshape(len(fake), -1).astype(np.float64)
    center = r.mean(axis=0)
    _, s, vt = np.linalg.svd(r - center, full_matrices=False)
    if len(s) < 2 or s[1] <= 1e-10 * max(s[0], 1e-300):
        raise DegenerateDataError("real windows span fewer than two dimensions")
    comps = vt[:2]
    # sign convention: largest-magnitude loading of each axis is positive
    signs = np.sign(comps[np.arange(2), np.argmax(np.abs(comps), axis=1)])
    comps = comps * signs[:, None]
    var = s**2 / (len(r) - 1)
    return PCAProjection((r - center) @ comps.T, (f - center) @ comps.T, comps, center, var)
