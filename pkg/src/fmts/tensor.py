"""Dense tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`GradTape` is active on the
current thread and at least one operand requires grad. Outside a tape every
op is a plain numpy evaluation, which is what sampling and evaluation use.

Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with GradTape() as tape:
        loss = mse_loss(x @ w, y)
    tape.backward(loss)     # w.grad is now populated
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Sequence

import numpy as np

from .errors import AxisError, ContractError, DomainError, ShapeError

_state = threading.local()


def get_default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with.

    Training and sampling run in float32; float64 exists for gradient checks.
    """
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def _active_tape():
    return getattr(_state, "tape", None)


# --------------------------------------------------------------------------
# random streams


def make_rng(seed) -> np.random.Generator:
    """Seeded counter-based (Philox) generator."""
    if seed is None:
        raise ContractError("an explicit seed is required")
    return np.random.Generator(np.random.Philox(seed))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent child streams from ``rng``."""
    return rng.spawn(n)


# --------------------------------------------------------------------------
# tape


class GradTape:
    """Ordered record of differentiable ops executed inside its context.

    A tape is confined to the thread that entered it and can be replayed
    backward exactly once.
    """

    def __init__(self):
        self._nodes = []
        self._leaves = {}
        self._consumed = False

    def __enter__(self):
        if _active_tape() is not None:
            raise ContractError("a GradTape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, out, parents, backward):
        if self._consumed:
            raise ContractError("cannot record on a tape that was already replayed")
        for p in parents:
            if p.requires_grad and p._tape is not self:
                self._leaves[id(p)] = p
        self._nodes.append((out, parents, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on the tape."""
        if self._consumed:
            raise ContractError("backward already ran on this tape; start a new one")
        if not isinstance(loss, Tensor) or loss._tape is not self:
            raise ContractError("loss was not produced on this tape (detached)")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            g = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=leaf.data.dtype)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        self._consumed = True
        self._nodes.clear()


# --------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        if self._tape is None:
            raise ContractError("tensor is not on an active tape (detached)")
        self._tape.backward(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def apply_op(data, parents, backward) -> Tensor:
    """Wrap ``data`` as the output of a custom op.

    ``backward(g)`` must return one gradient (or None) per parent. The op is
    recorded only when a tape is active and some parent requires grad.
    """
    return _result(np.asarray(data), tuple(parents), backward)


def _result(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = tape
        tape._record(out, parents, backward)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise AxisError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    return tuple(out)


# --------------------------------------------------------------------------
# constructors


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape)), requires_grad=requires_grad)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data), dtype=x.dtype)


def ones(shape) -> Tensor:
    return Tensor(np.ones(_check_shape(shape)))


def randn(shape, rng: np.random.Generator, requires_grad=False) -> Tensor:
    """I.i.d. standard normal draws from ``rng`` (drawn in float64, then cast)."""
    return Tensor(rng.standard_normal(_check_shape(shape)), requires_grad=requires_grad)


# --------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = x.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _result(-x.data, (x,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # one large GEMM instead of numpy's per-batch loop
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + b.shape[-1:])
    else:
        try:
            out = np.matmul(a.data, b.data)
        except ValueError as exc:
            raise ShapeError(str(exc)) from None

    def backward(g):
        ga = gb = None
        if b.ndim == 2:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g2
        else:
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, (a, b), backward)


# --------------------------------------------------------------------------
# elementwise unary


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    half = x.dtype.type(0.5)
    y = half * (1 + np.tanh(half * x.data))
    return _result(y, (x,), lambda g: (g * y * (1 - y),))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1 - y * y),))


def exp(x) -> Tensor:
    """Elementwise exponential; raises DomainError if the result overflows."""
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    if not np.all(np.isfinite(y)):
        raise DomainError("exp overflowed; inputs too large for the tensor dtype")
    return _result(y, (x,), lambda g: (g * y,))


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    y = np.logaddexp(0, x.data).astype(x.dtype, copy=False)
    half = x.dtype.type(0.5)

    def backward(g):
        return (g * half * (1 + np.tanh(half * x.data)),)

    return _result(y, (x,), backward)


def silu(x) -> Tensor:
    x = _as_tensor(x)
    half = x.dtype.type(0.5)
    s = half * (1 + np.tanh(half * x.data))
    return _result(x.data * s, (x,), lambda g: (g * s * (1 + x.data * (1 - s)),))


# --------------------------------------------------------------------------
# reductions


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _result(out, (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    inv = x.dtype.type(1.0 / count)
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * inv, x.shape),)

    return _result(out, (x,), backward)


# --------------------------------------------------------------------------
# structural


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = _norm_axis(axes, x.ndim)
    if sorted(axes) != list(range(x.ndim)):
        raise AxisError(f"invalid permutation {axes} for {x.ndim}-d tensor")
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def broadcast_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = np.broadcast_to(x.data, tuple(shape))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _result(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(tensors: Sequence, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    (ax,) = _norm_axis(axis, tensors[0].ndim)
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, tuple(tensors), backward)


def split(x, sizes: Sequence[int], axis=0) -> list[Tensor]:
    """Split ``x`` along ``axis`` into pieces of the given sizes."""
    x = _as_tensor(x)
    (ax,) = _norm_axis(axis, x.ndim)
    sizes = [int(s) for s in sizes]
    if sum(sizes) != x.shape[ax] or any(s < 1 for s in sizes):
        raise ShapeError(f"split sizes {sizes} do not partition extent {x.shape[ax]}")
    outs = []
    start = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[ax] = slice(start, start + size)
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        outs.append(_result(x.data[index], (x,), backward))
        start += size
    return outs


# --------------------------------------------------------------------------
# normalization and losses


def rms_norm(x, gain, eps=1e-6) -> Tensor:
    """``gain * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    if eps <= 0:
        raise DomainError("rms_norm eps must be > 0")
    x, gain = _as_tensor(x), _as_tensor(gain)
    if gain.shape != x.shape[-1:]:
        raise ShapeError(f"gain shape {gain.shape} does not match last axis of {x.shape}")
    n = x.shape[-1]
    inv_n = x.dtype.type(1.0 / n)
    ms = np.einsum("...i,...i->...", x.data, x.data)[..., None] * inv_n
    r = 1.0 / np.sqrt(ms + x.dtype.type(eps))
    y = x.data * r

    def backward(g):
        gy = g * gain.data
        dot = np.einsum("...i,...i->...", gy, y)[..., None] * inv_n
        gx = r * (gy - y * dot)
        ggain = (g * y).reshape(-1, n).sum(axis=0) if gain.requires_grad else None
        return gx, ggain

    return _result(y * gain.data, (x, gain), backward)


def mse_loss(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.mean(diff * diff)

    def backward(g):
        gp = g * diff * diff.dtype.type(2.0 / diff.size)
        return gp, -gp

    return _result(np.asarray(out, dtype=diff.dtype), (pred, target), backward)


def bce_with_logits(logits, labels) -> Tensor:
    """Mean binary cross-entropy of ``labels`` in {0,1} given raw logits."""
    logits, labels = _as_tensor(logits), _as_tensor(labels)
    if logits.shape != labels.shape:
        raise ShapeError(f"bce shapes differ: {logits.shape} vs {labels.shape}")
    return mean(softplus(logits) - logits * labels)
