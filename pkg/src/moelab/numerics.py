"""Dense float64 tensors with a reverse-mode gradient tape.

Operations are recorded on the innermost active :class:`Tape` when at least
one input requires a gradient. ``Tape.gradient`` walks the records in reverse
and accumulates vector-Jacobian products into the requested leaves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class ParameterError(ValueError):
    pass


_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    forward: Callable[..., np.ndarray]


@dataclass
class Tape:
    """Records primitive applications for reverse-mode differentiation."""

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def gradient(self, output: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
        wrt = list(wrt)
        if output.data.size != 1:
            raise ContractError(
                f"gradient seed must be a scalar, got shape {output.shape}"
            )
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [
            grads.get(id(t), np.zeros_like(t.data)).reshape(t.shape) for t in wrt
        ]

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded output from its recorded inputs."""
        return [rec.forward(*(i.data for i in rec.inputs)) for rec in self.records]


def gradient(tape: Tape, output: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    return tape.gradient(output, wrt)


def _record(op, inputs, out_data, backward, forward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _TAPES:
        _TAPES[-1].records.append(_Record(op, tuple(inputs), out, backward, forward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        np.add,
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        np.subtract,
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        "mul",
        (a, b),
        a.data * b.data,
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
        np.multiply,
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        "div",
        (a, b),
        a.data / b.data,
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        np.divide,
    )


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record("exp", (x,), out, lambda g: (g * out,), np.exp)


def log(x) -> Tensor:
    x = as_tensor(x)
    return _record("log", (x,), np.log(x.data), lambda g: (g / x.data,), np.log)


def square(x) -> Tensor:
    x = as_tensor(x)
    return _record(
        "square", (x,), x.data * x.data, lambda g: (2.0 * g * x.data,), np.square
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _record("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),), _sigmoid)


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _record(
        "silu",
        (x,),
        x.data * s,
        lambda g: (g * (s + x.data * s * (1.0 - s)),),
        lambda z: z * _sigmoid(z),
    )


def rsqrt(x) -> Tensor:
    x = as_tensor(x)
    r = 1.0 / np.sqrt(x.data)
    return _record(
        "rsqrt", (x,), r, lambda g: (-0.5 * g * r * r * r,), lambda z: 1.0 / np.sqrt(z)
    )


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` holds, else ``b``; ``cond`` is constant."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _record(
        "where",
        (a, b),
        np.where(cond, a.data, b.data),
        lambda g: (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        ),
        lambda x, y: np.where(cond, x, y),
    )


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(
        "sum",
        (x,),
        x.data.sum(axis=axes, keepdims=keepdims),
        bwd,
        lambda z: z.sum(axis=axes, keepdims=keepdims),
    )


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def _logsumexp(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]


def logsumexp_lastdim(x) -> Tensor:
    x = as_tensor(x)
    out = _logsumexp(x.data)
    return _record(
        "logsumexp",
        (x,),
        out,
        lambda g: (g[..., None] * np.exp(x.data - out[..., None]),),
        _logsumexp,
    )


def _softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_lastdim(x) -> Tensor:
    """Softmax over the last axis with max-subtraction; ``-inf`` entries get weight 0."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a nonempty last axis, got {x.shape}")
    p = _softmax(x.data)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (x,), p, bwd, _softmax)


# ---------------------------------------------------------------- linear algebra / shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _record("matmul", (a, b), a.data @ b.data, bwd, np.matmul)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    return _record(
        "reshape",
        (x,),
        x.data.reshape(shape),
        lambda g: (g.reshape(x.shape),),
        lambda z: z.reshape(shape),
    )


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(
        "transpose",
        (x,),
        np.transpose(x.data, axes),
        lambda g: (np.transpose(g, inv),),
        lambda z: np.transpose(z, axes),
    )


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)

    def bwd(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _record("getitem", (x,), x.data[idx], bwd, lambda z: z[idx])


def take(x, indices, axis: int) -> Tensor:
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim

    def bwd(g):
        out = np.zeros_like(x.data)
        gm = np.moveaxis(g, axis, 0)
        om = np.moveaxis(out, axis, 0)
        np.add.at(om, indices, gm)
        return (out,)

    return _record(
        "take",
        (x,),
        np.take(x.data, indices, axis=axis),
        bwd,
        lambda z: np.take(z, indices, axis=axis),
    )


def scatter_rows(x, rows, n_rows: int) -> Tensor:
    """Place the rows of ``x`` at ``rows`` of an ``n_rows``-row zero matrix (summing duplicates)."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)

    def fwd(z):
        out = np.zeros((n_rows,) + z.shape[1:])
        np.add.at(out, rows, z)
        return out

    return _record("scatter_rows", (x,), fwd(x.data), lambda g: (g[rows],), fwd)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(
        "concat",
        tuple(xs),
        np.concatenate([x.data for x in xs], axis=axis),
        bwd,
        lambda *zs: np.concatenate(zs, axis=axis),
    )


# ---------------------------------------------------------------- composites


def rms_normalize(x, gain, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
    x, gain = as_tensor(x), as_tensor(gain)
    if gain.shape != (x.shape[-1],):
        raise DimensionError(
            f"gain shape {gain.shape} does not match last extent of {x.shape}"
        )
    ms = mean(square(x), axis=-1, keepdims=True)
    return x * rsqrt(ms + eps) * gain


def cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Mean token cross-entropy; ``logits`` is ``[..., V]`` and ``targets`` matches its leading shape."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    flat = reshape(logits, (-1, logits.shape[-1]))
    lse = logsumexp_lastdim(flat)
    picked = getitem(flat, (np.arange(flat.shape[0]), targets.reshape(-1)))
    return mean(lse - picked)


# ---------------------------------------------------------------- sampling


def sample_truncated_normal(count: int, sigma: float, seed: int | np.random.Generator) -> Tensor:
    """I.i.d. N(0, sigma^2) draws restricted to [-3 sigma, 3 sigma] by rejection."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = np.empty(count)
    filled = 0
    while filled < count:
        need = count - filled
        draw = rng.standard_normal(need + need // 100 + 16)
        draw = draw[np.abs(draw) <= 3.0][:need]
        out[filled : filled + draw.size] = draw
        filled += draw.size
    return Tensor(out * sigma)


def truncated_normal_std(sigma: float, bound: float = 3.0) -> float:
    """Standard deviation of N(0, sigma^2) truncated symmetrically at ``bound`` sigmas."""
    phi = math.exp(-0.5 * bound * bound) / math.sqrt(2.0 * math.pi)
    mass = math.erf(bound / math.sqrt(2.0))
    return sigma * math.sqrt(1.0 - 2.0 * bound * phi / mass)


# ---------------------------------------------------------------- finite differences


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    h: float = 1e-4,
    indices: Sequence[int] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``indices`` restricts the comparison to those flat coordinates of ``x``.
    The relative error denominator is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    base = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    (analytic,) = tape.gradient(out, [leaf])
    analytic = analytic.reshape(-1)
    flat = base.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        old = flat[i]
        flat[i] = old + h
        fp = float(f(Tensor(base)).data)
        flat[i] = old - h
        fm = float(f(Tensor(base)).data)
        flat[i] = old
        numeric = (fp - fm) / (2.0 * h)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
