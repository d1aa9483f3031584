"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape` whenever one of their
inputs requires a gradient. Each record keeps the inputs and a closure mapping
the output cotangent to input cotangents. :func:`backward` replays the tape in
reverse once; a tape cannot be replayed twice.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = reduce_sum(mul(x, x))
    >>> backward(y, [x])[x]
    array([2., 4.])
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TapeError(RuntimeError):
    """Misuse of the tape contract (non-scalar loss, replayed tape, ...)."""


_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __neg__ = lambda a: scale(a, -1.0)


class Tape:
    """Ordered record of primitive ops executed while the tape is active."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``data`` as an op output and record it if any input is tracked."""
    stack = _tape_stack()
    if stack and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape = stack[-1]
        if tape.consumed:
            raise TapeError("cannot record onto a tape that has already been replayed")
        tape.records.append((out, tuple(inputs), vjp))
        return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _emit(y, (a,), lambda g: (g * y,))


def ln(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("ln of non-positive value")
    x = a.data
    return _emit(np.log(x), (a,), lambda g: (g / x,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def abs(a) -> Tensor:  # noqa: A001 - mirrors the numpy name
    a = _as_tensor(a)
    sgn = np.sign(a.data)  # sign(0) = 0
    return _emit(np.abs(a.data), (a,), lambda g: (g * sgn,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    y = np.sqrt(a.data)
    return _emit(y, (a,), lambda g: (g * 0.5 / y,))


def power(a, p: float) -> Tensor:
    """``a ** p`` for non-negative ``a``; ``p == 0`` yields ones with zero gradient."""
    a = _as_tensor(a)
    x = a.data
    if np.any(x < 0):
        raise DomainError("power of negative base")
    p = float(p)
    if p == 0.0:
        return _emit(np.ones_like(x), (a,), lambda g: (np.zeros_like(g),))
    if p == 1.0:
        return _emit(x.copy(), (a,), lambda g: (g,))
    y = x**p
    return _emit(y, (a,), lambda g: (g * p * np.where(x > 0, x ** (p - 1.0), 0.0),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``(..., m, k) @ (k, n)`` or batched ``(B, m, k) @ (B, k, n)``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _emit(out, (a, b), vjp)

    def vjp_batched(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _emit(ad @ bd, (a, b), vjp_batched)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _emit(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def take_rows(table, index) -> Tensor:
    """Row lookup ``table[index]``; gradient scatters back with accumulation."""
    table = _as_tensor(table)
    idx = np.asarray(index, dtype=np.int64)
    tshape = table.shape

    def vjp(g):
        out = np.zeros(tshape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(table.data[idx], (table,), vjp)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    count = a.data.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _emit(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _emit(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if eps <= 0:
        raise ValueError("eps must be > 0")
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def vjp(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(xhat * gd + bias.data, (x, gain, bias), vjp)


def l2_normalize_rows(x, eps: float = 0.0) -> Tensor:
    """Divide each row (last axis) by its Euclidean norm."""
    x = _as_tensor(x)
    norm = sqrt(add(reduce_sum(mul(x, x), axis=-1, keepdims=True), eps)) if eps else sqrt(
        reduce_sum(mul(x, x), axis=-1, keepdims=True)
    )
    return mul(x, power(norm, -1.0))


# ---------------------------------------------------------------------------
# replay


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None, tape: Tape | None = None) -> dict:
    """Reverse-accumulate ``d loss / d leaf`` over the tape that recorded ``loss``.

    Returns a dict keyed by tensor. Tensors listed in ``wrt`` always appear, with
    zeros if they did not influence the loss.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        stack = _tape_stack()
        if not stack:
            raise TapeError("no active tape; pass tape= explicitly")
        tape = stack[-1]
    if tape.consumed:
        raise TapeError("tape already replayed; record a fresh forward pass")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    produced = {id(out) for out, _, _ in tape.records}
    for out, inputs, vjp in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = vjp(g)
        for t, gi in zip(inputs, in_grads):
            if not t.requires_grad or gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t

    result = {t: grads[k] for k, t in leaves.items()}
    if loss.requires_grad and id(loss) not in produced:
        result[loss] = np.ones_like(loss.data)
    if wrt is not None:
        for t in wrt:
            if t not in result:
                result[t] = np.zeros_like(t.data)
    return result


def grad_check(
    f: Callable[[dict], Tensor],
    theta: dict,
    h: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` maps a dict of Tensors to a scalar Tensor; ``theta`` maps the same keys
    to arrays. Relative error uses ``max(1, |analytic|)`` as denominator. With
    ``max_coords`` a random subset of coordinates (over all parameters) is probed.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    theta = {k: np.array(v, dtype=np.float64) for k, v in theta.items()}
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in theta.items()}
    with Tape():
        loss = f(params)
        g = backward(loss, params.values())
    analytic = {k: g[t] for k, t in params.items()}

    coords = [(k, i) for k, v in theta.items() for i in range(v.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    def value(k, i, delta):
        flat = theta[k].reshape(-1)
        old = flat[i]
        flat[i] = old + delta
        try:
            return f({n: Tensor(v) for n, v in theta.items()}).item()
        finally:
            flat[i] = old

    worst = 0.0
    for k, i in coords:
        numeric = (value(k, i, h) - value(k, i, -h)) / (2 * h)
        a = analytic[k].reshape(-1)[i]
        worst = max(worst, float(np.abs(a - numeric) / max(1.0, np.abs(a))))
    return worst
