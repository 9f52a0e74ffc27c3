"""Velocity field G(z_t, t): a pre-norm encoder-decoder transformer.

The encoder embeds the noised series token by token; the decoder starts
from a learned query sequence of the same length and cross-attends to the
encoder output. A sinusoidal time embedding, passed through a small MLP, is
added to every token in both stacks. Attention uses RMS-normalized queries
and keys, rotary position embedding, elementwise sigmoid weights instead of
a softmax, and learned register tokens appended to the key/value sequence of
every self-attention block.

Parameter count, with D=model_dim, F=feedforward_dim, E=time_embed_dim,
R=register_count, h=D/num_heads, L=series_length, c=channels::

    attn(R)  = 4*D*D + 4*D + 2*h + R*D
    ffn      = 2*D*F + F + D
    total    = (c*D + D) + (E*D + D + D*D + D)
             + encoder_layers * (2*D + attn(R) + ffn) + D
             + L*D + decoder_layers * (3*D + attn(R) + attn(0) + ffn)
             + D + (D*c + c) + (D*c + c)

The last term is the skip gain: the output is ``head(decoder(z, t)) +
s(t) * z`` with ``s(t)`` a per-channel linear read-out of the time
embedding, so affine-in-z fields (Gaussian to Gaussian transport) are
representable everywhere, not only on the data support.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    series_length: int = 24
    channels: int = 1
    model_dim: int = 64
    num_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    feedforward_dim: int = 128
    register_count: int = 8
    rope_base: float = 50000.0
    time_embed_dim: int = 32

    def validate(self) -> "ModelConfig":
        for name in ("series_length", "channels", "model_dim", "num_heads",
                     "encoder_layers", "decoder_layers", "feedforward_dim", "time_embed_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"model.{name} must be an integer >= 1, got {value!r}")
        if self.register_count < 0:
            raise ConfigError("model.register_count must be >= 0")
        if self.model_dim % self.num_heads:
            raise ConfigError("model.model_dim must be divisible by model.num_heads")
        if self.head_dim % 2:
            raise ConfigError("head dimension (model_dim / num_heads) must be even for RoPE")
        if not self.rope_base > 1:
            raise ConfigError("model.rope_base must be > 1")
        return self

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


def _attn_shapes(prefix, cfg, registers):
    D, h = cfg.model_dim, cfg.head_dim
    shapes = {}
    for proj in ("q_proj", "k_proj", "v_proj", "out_proj"):
        shapes[f"{prefix}.{proj}.weight"] = (D, D)
        shapes[f"{prefix}.{proj}.bias"] = (D,)
    shapes[f"{prefix}.q_norm.gain"] = (h,)
    shapes[f"{prefix}.k_norm.gain"] = (h,)
    if registers:
        shapes[f"{prefix}.registers"] = (registers, D)
    return shapes


def _ffn_shapes(prefix, cfg):
    D, F = cfg.model_dim, cfg.feedforward_dim
    return {
        f"{prefix}.fc1.weight": (D, F),
        f"{prefix}.fc1.bias": (F,),
        f"{prefix}.fc2.weight": (F, D),
        f"{prefix}.fc2.bias": (D,),
    }


def param_shapes(cfg: ModelConfig) -> dict:
    """Ordered mapping of parameter path to shape implied by ``cfg``."""
    cfg.validate()
    D, c, R = cfg.model_dim, cfg.channels, cfg.register_count
    shapes = {
        "in_proj.weight": (c, D),
        "in_proj.bias": (D,),
        "time.fc1.weight": (cfg.time_embed_dim, D),
        "time.fc1.bias": (D,),
        "time.fc2.weight": (D, D),
        "time.fc2.bias": (D,),
    }
    for i in range(cfg.encoder_layers):
        p = f"enc.{i}"
        shapes[f"{p}.norm1.gain"] = (D,)
        shapes.update(_attn_shapes(f"{p}.attn", cfg, R))
        shapes[f"{p}.norm2.gain"] = (D,)
        shapes.update(_ffn_shapes(f"{p}.ff", cfg))
    shapes["enc.norm.gain"] = (D,)
    shapes["dec.query"] = (cfg.series_length, D)
    for i in range(cfg.decoder_layers):
        p = f"dec.{i}"
        shapes[f"{p}.norm1.gain"] = (D,)
        shapes.update(_attn_shapes(f"{p}.self_attn", cfg, R))
        shapes[f"{p}.norm2.gain"] = (D,)
        shapes.update(_attn_shapes(f"{p}.cross_attn", cfg, 0))
        shapes[f"{p}.norm3.gain"] = (D,)
        shapes.update(_ffn_shapes(f"{p}.ff", cfg))
    shapes["out.norm.gain"] = (D,)
    shapes["out_proj.weight"] = (D, c)
    shapes["out_proj.bias"] = (c,)
    shapes["skip.weight"] = (D, c)
    shapes["skip.bias"] = (c,)
    return shapes


class ModelParameters:
    """Named parameter tensors of the velocity model plus its config."""

    def __init__(self, config: ModelConfig, tensors: dict):
        self.config = config
        self.tensors = dict(tensors)
        expected = param_shapes(config)
        if list(expected) != list(self.tensors):
            missing = set(expected) ^ set(self.tensors)
            raise ShapeError(f"parameter names do not match config: {sorted(missing)[:5]}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.tensors[name].shape} != expected {shape}")

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def replace(self, tensors) -> "ModelParameters":
        return ModelParameters(self.config, tensors)

    def astype(self, dtype) -> "ModelParameters":
        return self.replace({k: Tensor(v.data, requires_grad=True, dtype=dtype) for k, v in self.items()})

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.items()}


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParameters:
    """Scaled-normal weights (std 1/sqrt(fan_in)), zero biases, unit gains.

    Register tokens and the decoder query sequence are drawn with std 0.02.
    The output head and skip gain start at zero, so an untrained model is
    the zero field.
    """
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias") or name in ("out_proj.weight", "skip.weight"):
            value = np.zeros(shape)
        elif name.endswith(".gain"):
            value = np.ones(shape)
        elif name.endswith(".registers") or name == "dec.query":
            value = 0.02 * rng.standard_normal(shape)
        else:
            value = rng.standard_normal(shape) / math.sqrt(shape[0])
        tensors[name] = Tensor(value, requires_grad=True)
    return ModelParameters(config, tensors)


# --------------------------------------------------------------------------
# building blocks


def time_embedding(t, dim: int, max_period: float = 10000.0, scale: float = 1000.0) -> np.ndarray:
    """Sinusoidal features of ``t`` in [0, 1]: cos block then sin block.

    Frequencies are geometrically spaced from 1 down to 1/max_period and act
    on ``scale * t``; the slowest one keeps the map injective on [0, 1].
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(~np.isfinite(t)) or np.any(t < 0) or np.any(t > 1):
        raise DomainError("time values must lie in [0, 1]")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    args = scale * t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=-1)
    return emb


def rope_angles(positions, head_dim: int, base: float) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, head_dim, 2) / head_dim)
    return positions[:, None] * inv_freq[None, :]


def rope_apply(x, positions, rope_base: float) -> Tensor:
    """Rotate consecutive feature pairs of ``x`` (..., L, h) by position angles.

    Pair j at position p is rotated by ``p * rope_base**(-2j/h)``.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    h = x.shape[-1]
    if h % 2:
        raise ShapeError(f"RoPE needs an even feature dimension, got {h}")
    if len(positions) != x.shape[-2]:
        raise ShapeError(f"{len(positions)} positions for sequence length {x.shape[-2]}")
    ang = rope_angles(positions, h, rope_base)
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)

    def rotate(data, sin):
        a, b = data[..., 0::2], data[..., 1::2]
        out = np.empty_like(data)
        out[..., 0::2] = a * cos - b * sin
        out[..., 1::2] = a * sin + b * cos
        return out

    return T.apply_op(rotate(x.data, sin), (x,), lambda g: (rotate(g, -sin),))


def sigmoid_attention(q, k, v, registers=None, return_weights=False):
    """Elementwise-sigmoid attention over the last two axes.

    ``q`` is (..., Lq, h); ``k`` and ``v`` are (..., Lk, h). ``registers`` is
    an optional (keys, values) pair of shape (..., R, h) appended to the
    key/value sequence; outputs keep the query length, so registers never
    appear in the output. Weights are ``sigmoid(q k^T / sqrt(h))`` and are not
    normalized across keys.
    """
    q, k, v = (x if isinstance(x, Tensor) else Tensor(x) for x in (q, k, v))
    h = q.shape[-1]
    if k.shape[-1] != h or v.shape[-1] != h:
        raise ShapeError(f"head dims differ: q {q.shape}, k {k.shape}, v {v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("keys and values must have the same length")
    if registers is not None:
        rk, rv = registers
        lead = k.shape[:-2]
        rk = T.broadcast_to(rk, lead + rk.shape[-2:])
        rv = T.broadcast_to(rv, lead + rv.shape[-2:])
        k = T.concat([k, rk], axis=-2)
        v = T.concat([v, rv], axis=-2)
    logits = T.scale(T.matmul(q, T.transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(h))
    weights = T.sigmoid(logits)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _linear(x, p, prefix):
    return T.matmul(x, p[prefix + ".weight"]) + p[prefix + ".bias"]


def _heads(x, B, L, H, h):
    return T.transpose(T.reshape(x, (B, L, H, h)), (0, 2, 1, 3))


def _attention_block(p, prefix, cfg, x_q, x_kv, positions, registers):
    B, Lq, D = x_q.shape
    Lk = x_kv.shape[1]
    H, h = cfg.num_heads, cfg.head_dim
    # QK-RMSNorm is applied per head, before moving heads to axis 1
    q = T.rms_norm(T.reshape(_linear(x_q, p, prefix + ".q_proj"), (B, Lq, H, h)), p[prefix + ".q_norm.gain"])
    k = T.rms_norm(T.reshape(_linear(x_kv, p, prefix + ".k_proj"), (B, Lk, H, h)), p[prefix + ".k_norm.gain"])
    q = rope_apply(T.transpose(q, (0, 2, 1, 3)), positions, cfg.rope_base)
    k = rope_apply(T.transpose(k, (0, 2, 1, 3)), positions, cfg.rope_base)
    v = _heads(_linear(x_kv, p, prefix + ".v_proj"), B, Lk, H, h)
    reg = None
    if registers:
        tokens = p[prefix + ".registers"]
        R = tokens.shape[0]
        rk = T.rms_norm(T.reshape(_linear(tokens, p, prefix + ".k_proj"), (1, R, H, h)), p[prefix + ".k_norm.gain"])
        rv = _heads(_linear(tokens, p, prefix + ".v_proj"), 1, R, H, h)
        reg = (T.transpose(rk, (0, 2, 1, 3)), rv)
    out = sigmoid_attention(q, k, v, reg)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, Lq, D))
    return _linear(out, p, prefix + ".out_proj")


def _ffn(p, prefix, x):
    return _linear(T.silu(_linear(x, p, prefix + ".fc1")), p, prefix + ".fc2")


def _as_batch_times(t, batch):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(batch, float(t))
    t = t.reshape(-1)
    if t.shape[0] != batch:
        raise ShapeError(f"got {t.shape[0]} time values for batch of {batch}")
    return t


def forward(params: ModelParameters, z_t, t) -> Tensor:
    """Velocity estimate with the same (batch, length, channels) shape as ``z_t``.

    ``t`` is a scalar or one value per batch element, each in [0, 1].
    """
    cfg = params.config
    p = params.tensors
    z = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    if z.ndim != 3 or z.shape[1:] != (cfg.series_length, cfg.channels):
        raise ShapeError(f"expected input (batch, {cfg.series_length}, {cfg.channels}), got {z.shape}")
    if not np.all(np.isfinite(z.data)):
        raise DomainError("non-finite values in model input")
    B, L = z.shape[0], cfg.series_length
    t = _as_batch_times(t, B)
    emb = Tensor(time_embedding(t, cfg.time_embed_dim))
    temb_flat = _linear(T.silu(_linear(emb, p, "time.fc1")), p, "time.fc2")
    temb = T.reshape(temb_flat, (B, 1, cfg.model_dim))
    positions = np.arange(L)
    R = cfg.register_count

    x = _linear(z, p, "in_proj") + temb
    for i in range(cfg.encoder_layers):
        pre = f"enc.{i}"
        hx = T.rms_norm(x, p[pre + ".norm1.gain"])
        x = x + _attention_block(p, pre + ".attn", cfg, hx, hx, positions, R)
        x = x + _ffn(p, pre + ".ff", T.rms_norm(x, p[pre + ".norm2.gain"]))
    memory = T.rms_norm(x, p["enc.norm.gain"])

    y = T.reshape(p["dec.query"], (1, L, cfg.model_dim)) + temb
    for i in range(cfg.decoder_layers):
        pre = f"dec.{i}"
        hy = T.rms_norm(y, p[pre + ".norm1.gain"])
        y = y + _attention_block(p, pre + ".self_attn", cfg, hy, hy, positions, R)
        hy = T.rms_norm(y, p[pre + ".norm2.gain"])
        y = y + _attention_block(p, pre + ".cross_attn", cfg, hy, memory, positions, 0)
        y = y + _ffn(p, pre + ".ff", T.rms_norm(y, p[pre + ".norm3.gain"]))
    out = _linear(T.rms_norm(y, p["out.norm.gain"]), p, "out_proj")
    # time-dependent per-channel skip gain keeps the field affine in z far from the data
    gain = T.reshape(_linear(temb_flat, p, "skip"), (B, 1, cfg.channels))
    return out + gain * z


def velocity(params: ModelParameters, z, t) -> np.ndarray:
    """Tape-free evaluation of :func:`forward`, returned as an array."""
    dtype = params["in_proj.weight"].dtype
    with T.precision(dtype):
        return forward(params, np.asarray(z, dtype=dtype), t).data
