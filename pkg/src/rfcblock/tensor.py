"""Dense double-precision tensors with hand-written reverse-mode gradients.

Every kernel stores a closure that pushes its output gradient back to its
inputs; :meth:`Tensor.backward` replays the closures in reverse topological
order. Binary kernels broadcast with numpy rules and reduce gradients back
to operand shapes.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Sequence
from contextlib import contextmanager

import numpy as np

from .errors import DegenerateColumnError, DimensionError, NumericError, ValidationError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(extent <= 0 for extent in arr.shape):
            raise DimensionError(f"extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

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

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``grad``."""
        if not self.requires_grad:
            raise NumericError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        for node in order:
            if node._backward is not None:
                node.grad = np.zeros_like(node.data)
        self.grad = self.grad + grad
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return swapaxes(self, -1, -2)


class Parameter(Tensor):
    """A named leaf tensor that always requires gradients."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    live = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = live
    out.grad = None
    if live:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += _unbroadcast(g, t.data.shape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    out = a.data / b.data

    def backward(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * out / b.data)

    return _result(out, (a, b), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _result(out, (x,), backward)


@contextmanager
def relu_margin_probe():
    """Collect, per relu call in this thread, the smallest nonzero |input|.

    Exact zeros are skipped: they come from structurally empty inputs
    (e.g. an empty region's position row) that no perturbation moves.
    """
    prev = getattr(_state, "relu_margins", None)
    margins: list[float] = []
    _state.relu_margins = margins
    try:
        yield margins
    finally:
        _state.relu_margins = prev


def relu(x) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    probe = getattr(_state, "relu_margins", None)
    if probe is not None:
        mags = np.abs(x.data[x.data != 0])
        probe.append(float(mags.min()) if mags.size else np.inf)

    def backward(g):
        _accumulate(x, g * active)

    return _result(np.where(active, x.data, 0.0), (x,), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * out)

    return _result(out, (x,), backward)


def log(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, g / x.data)

    return _result(np.log(x.data), (x,), backward)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def backward(g):
        _accumulate(x, g * 0.5 / out)

    return _result(out, (x,), backward)


def abs_(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, g * np.sign(x.data))

    return _result(np.abs(x.data), (x,), backward)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient is zero where clamping is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        _accumulate(x, g * inside)

    return _result(np.clip(x.data, lo, hi), (x,), backward)


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "relu": relu,
    "add": add,
    "mul": mul,
    "sub": sub,
}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch one of the named pointwise kernels."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValidationError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# ------------------------------------------------------------------ reductions


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = x.data.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axes, keepdims), 1.0 / count)


def mean_over_axis(x, axis: int) -> Tensor:
    """Arithmetic mean along one axis; the axis is dropped."""
    if not isinstance(axis, (int, np.integer)):
        raise DimensionError("mean_over_axis takes a single axis")
    return mean(x, int(axis))


# ------------------------------------------------------------------- structure


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(out, (x,), backward)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, np.transpose(g, inverse))

    return _result(np.transpose(x.data, axes), (x,), backward)


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def take(x, index) -> Tensor:
    """Numpy-style indexing (basic or advanced)."""
    x = as_tensor(x)
    out = np.array(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        _accumulate(x, full)

    return _result(out, (x,), backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        for i, t in enumerate(ts):
            _accumulate(t, np.take(g, i, axis=axis))

    return _result(out, ts, backward)


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)

    return _result(out, ts, backward)


# -------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch shapes {a.shape} and {b.shape}") from None

    def backward(g):
        _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), backward)


# ------------------------------------------------------------- normalizations


def softmax_rows(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along the last axis, stabilized by the row max.

    ``mask`` (bool, broadcastable to ``x``) marks entries that take part;
    excluded entries get probability exactly 0.
    """
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows: non-finite input")
    logits = x.data if mask is None else np.where(mask, x.data, -np.inf)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        _accumulate(x, out * (g - inner))

    return _result(out, (x,), backward)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax: non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        _accumulate(x, g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _result(out, (x,), backward)


def l1_normalize_columns(x) -> Tensor:
    """Divide each column (axis -2 reduction) by its sum."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError("l1_normalize_columns needs rank >= 2")
    s = x.data.sum(axis=-2, keepdims=True)
    if np.any(s == 0):
        raise DegenerateColumnError("l1_normalize_columns: a column sums to zero")
    out = x.data / s

    def backward(g):
        inner = (g * x.data).sum(axis=-2, keepdims=True)
        _accumulate(x, g / s - inner / (s * s))

    return _result(out, (x,), backward)


def norm_rows(x) -> Tensor:
    """Euclidean norm over the last axis; gradient at the origin is 0."""
    x = as_tensor(x)
    out = np.sqrt((x.data * x.data).sum(axis=-1))
    safe = np.where(out > 0, out, 1.0)

    def backward(g):
        scale = np.where(out > 0, g / safe, 0.0)
        _accumulate(x, x.data * scale[..., None])

    return _result(out, (x,), backward)


def normalize_rows(x) -> Tensor:
    """Scale each row (last axis) to unit length; zero rows stay zero."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    nonzero = n > 0
    safe = np.where(nonzero, n, 1.0)
    out = np.where(nonzero, x.data / safe, 0.0)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        _accumulate(x, np.where(nonzero, (g - out * inner) / safe, 0.0))

    return _result(out, (x,), backward)


def cosine_matrix(x) -> Tensor:
    """Pairwise cosine similarities between rows; a zero row scores 0."""
    u = normalize_rows(x)
    return matmul(u, swapaxes(u, -1, -2))


# ------------------------------------------------------------ verification


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x.data`` is perturbed in place one coordinate at a time and restored,
    so ``f`` may read ``x`` through a closure (e.g. a model parameter).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f(x))
            flat[i] = orig - eps
            fm = _scalar(f(x))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"finite_diff_grad: non-finite value at coordinate {i}")
            gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        v = v.data
    return float(np.asarray(v).reshape(()))


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest |a - n| / max(|a|, |n|) over entries where either exceeds ``floor``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    keep = scale > floor
    if not np.any(keep):
        return 0.0
    return float(np.max(np.abs(analytic - numeric)[keep] / scale[keep]))


def linear(x, weight, bias=None) -> Tensor:
    """Affine map on the last axis: ``x @ weight + bias`` for any leading shape."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    lead = x.shape[:-1]
    out = matmul(reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        out = add(out, bias)
    return reshape(out, (*lead, weight.shape[1]))
