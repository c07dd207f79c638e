"""Dense tensors with tape-based reverse-mode differentiation.

Storage is a numpy array (float32 for training, float64 for gradient
checks). Operations record themselves on the active :class:`Tape` when at
least one input requires a gradient; outside a tape everything runs as
plain numpy.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class NumericalError(ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""


class DegenerateVectorError(ValueError):
    """Normalization was requested for a (near) zero vector."""


_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "grad")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -------------------------------------------------------
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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, name: str | None = None, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


class _Node:
    __slots__ = ("op", "out", "parents", "backward_fn")

    def __init__(self, op, out, parents, backward_fn):
        self.op = op
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Records primitive ops in execution order (a valid topological order).

    Use as a context manager; ``backward`` replays the record in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
        return backward(self, loss, params)


def _recording() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericalError(f"{op}: {bad} non-finite value(s) in output of shape {arr.shape}")


def _make(op: str, out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    _check_finite(op, out)
    tape = _recording()
    needs = tape is not None and any(p.requires_grad for p in parents)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(op, result, tuple(parents), backward_fn))
    return result


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Reverse sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Returns a map ``id(tensor) -> gradient``. Every tensor in ``params`` gets
    an entry; those unreachable from ``loss`` get zeros. The gradient is also
    stored on ``tensor.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(f"backward of {node.op}", pg)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out: dict[int, np.ndarray] = {}
    for p in params or ():
        g = grads.get(id(p))
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype).reshape(p.shape)
        p.grad = g
        out[id(p)] = g
    return out


@contextlib.contextmanager
def no_record():
    """Temporarily suspend every active tape."""
    saved = list(_ACTIVE_TAPES)
    _ACTIVE_TAPES.clear()
    try:
        yield
    finally:
        _ACTIVE_TAPES.extend(saved)


# ---------------------------------------------------------------------------
# helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # constants adopt the dtype of the tensor operand (no silent f32 -> f64 upcast)
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def _bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), _bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericalError("log: non-positive input")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make("cos", np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make("sin", np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make("softplus", out.astype(x.dtype), (a,), lambda g: (g * sig.astype(x.dtype),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    c = np.asarray(_GELU_C, dtype=x.dtype)
    k = np.asarray(0.044715, dtype=x.dtype)
    inner = c * (x + k * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def _bw(g):
        dinner = c * (1.0 + 3.0 * k * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make("gelu", out, (a,), _bw)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def _bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), _bw)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), _bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum_(a, axis=axis, keepdims=keepdims) * np.asarray(1.0 / n, dtype=a.dtype)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _make("transpose", out, (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make("getitem", np.array(out), (a,), _bw)


def take_rows(table, idx) -> Tensor:
    """Gather rows of a 2-D table; ``idx`` may have any integer shape."""
    idx = np.asarray(idx, dtype=np.int64)
    return getitem(table, idx)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, ts, _bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def _bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make("stack", out, ts, _bw)


# ---------------------------------------------------------------------------
# fused reductions


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), _bw)


def softmax_row(x) -> Tensor:
    """Row-wise softmax of a 2-D tensor, max-shifted for stability."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError("softmax_row expects a 2-D tensor")
    return softmax(x, axis=-1)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    p = e / s

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)

    return _make("logsumexp", out if keepdims else np.squeeze(out, axis=axis), (a,), _bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain * x_hat + bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def _bw(g):
        gx_hat = g * gain.data
        gx = None
        if x.requires_grad:
            gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gbias = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, ggain, gbias

    return _make("layer_norm", out, (x, gain, bias), _bw)


def l2_normalize(x, axis: int = -1, min_norm: float = 1e-12) -> Tensor:
    """Scale vectors along ``axis`` to unit Euclidean length.

    Raises DegenerateVectorError for any vector with norm <= ``min_norm``.
    """
    x = as_tensor(x)
    norms = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=axis, keepdims=True))
    if np.any(norms <= min_norm):
        raise DegenerateVectorError(f"cannot normalize {int((norms <= min_norm).sum())} near-zero vector(s)")
    norms = norms.astype(x.dtype)
    out = x.data / norms

    def _bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norms,)

    return _make("l2_normalize", out, (x,), _bw)


def norm(x, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at zero is taken as 0."""
    x = as_tensor(x)
    out = np.sqrt((x.data * x.data).sum(axis=axis))

    def _bw(g):
        safe = np.where(out > 0, out, 1)
        scale = np.where(out > 0, g / safe, 0)
        return (np.expand_dims(scale, axis) * x.data,)

    return _make("norm", out, (x,), _bw)
