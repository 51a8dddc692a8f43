"""Dense tensors with reverse-mode differentiation.

Only the operations needed by the encoder and the pretraining objectives are
provided. Every op works on arrays with arbitrary leading batch axes; the
trailing one or two axes carry the matrix semantics.

A graph is built implicitly as ops run. ``backward`` walks it once in reverse
topological order and then releases it, so a second ``backward`` over the same
graph raises :class:`TapeError`.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


class ContractError(RuntimeError):
    pass


LN_EPS = 1e-5



class _Mode(threading.local):
    # per-thread so concurrent inference cannot flip another thread's mode
    grad_enabled = True
    checked = False


_state = _Mode()


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything for backward."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Raise :class:`NumericError` whenever a forward op produces a non-finite value."""
    prev = _state.checked
    _state.checked = enabled
    try:
        yield
    finally:
        _state.checked = prev


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "_parents", "_backward", "_released", "name")

    def __init__(self, value, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(value, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.value = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._released = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = np.asarray(x).dtype if np.asarray(x).dtype.kind == "f" else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _result_dtype(*ts: Tensor):
    return np.result_type(*[t.value.dtype for t in ts])


def _make(value: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _state.checked and not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value produced (shape {value.shape})")
    out = Tensor(value)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.value - b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value

    def backward(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _make(av * bv, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    av, bv = a.value, b.value

    def backward(g):
        return _unbroadcast(g / bv, a.shape), _unbroadcast(-g * av / (bv * bv), b.shape)

    return _make(av / bv, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)

    def backward(g):
        return (g * s,)

    return _make(a.value * a.value.dtype.type(s), (a,), backward)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.value
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)

    def backward(g):
        return (g * (cdf + x * pdf),)

    return _make((x * cdf).astype(x.dtype, copy=False), (a,), backward)


# ---------------------------------------------------------------------------
# shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    av, bv = a.value, b.value

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(av @ bv, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.value.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 axes, got shape {a.shape}")

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(np.swapaxes(a.value, -1, -2), (a,), backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        v = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(old),)

    return _make(v, (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the feature (last) axis by default."""
    parts = [as_tensor(p) for p in parts]
    lead = parts[0].shape[:-1] if axis == -1 else None
    if axis == -1:
        for p in parts[1:]:
            if p.shape[:-1] != lead:
                raise ShapeError(f"concat: incompatible shapes {parts[0].shape} and {p.shape}")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([p.value for p in parts], axis=axis), parts, backward)


def gather_rows(a, index) -> Tensor:
    """Select rows (second-to-last axis).

    ``index`` is either an int array of row ids applied to every leading slice,
    or a tuple ``(batch_ids, row_ids)`` for a 3-D input, producing an ``(N, cols)``
    matrix of the addressed rows.
    """
    a = as_tensor(a)
    shape = a.shape
    if isinstance(index, tuple):
        bi, ri = (np.asarray(i, dtype=np.intp) for i in index)
        if a.value.ndim != 3:
            raise ShapeError(f"gather_rows: paired index needs a 3-D input, got {shape}")
        if np.any(ri >= shape[1]) or np.any(ri < 0) or np.any(bi >= shape[0]) or np.any(bi < 0):
            raise IndexError("gather_rows: index out of range")
        out = a.value[bi, ri]

        def backward(g):
            ga = np.zeros(shape, dtype=g.dtype)
            np.add.at(ga, (bi, ri), g)
            return (ga,)
    else:
        ri = np.asarray(index, dtype=np.intp)
        if np.any(ri >= shape[-2]) or np.any(ri < 0):
            raise IndexError("gather_rows: index out of range")
        out = a.value[..., ri, :]

        def backward(g):
            ga = np.zeros(shape, dtype=g.dtype)
            np.add.at(ga, (Ellipsis, ri, slice(None)), g)
            return (ga,)

    return _make(out, (a,), backward)


def scatter_replace_rows(base, index, rows) -> Tensor:
    """Return a copy of ``base`` with the addressed rows replaced by ``rows``.

    Index conventions follow :func:`gather_rows`. ``rows`` may broadcast to the
    gathered shape (e.g. a single vector written into every addressed row).
    Replaced rows of ``base`` receive zero gradient. Indices must be unique.
    """
    base, rows = as_tensor(base), as_tensor(rows)
    shape = base.shape
    out = base.value.copy()
    if isinstance(index, tuple):
        key = tuple(np.asarray(i, dtype=np.intp) for i in index)
        if base.value.ndim != 3:
            raise ShapeError(f"scatter_replace_rows: paired index needs a 3-D input, got {shape}")
        bi, ri = key
        if np.any(ri >= shape[1]) or np.any(ri < 0) or np.any(bi >= shape[0]) or np.any(bi < 0):
            raise IndexError("scatter_replace_rows: index out of range")
        target_shape = (len(ri), shape[-1])
    else:
        ri = np.asarray(index, dtype=np.intp)
        if np.any(ri >= shape[-2]) or np.any(ri < 0):
            raise IndexError("scatter_replace_rows: index out of range")
        key = (Ellipsis, ri, slice(None))
        target_shape = out[key].shape
    try:
        out[key] = np.broadcast_to(rows.value, target_shape)
    except ValueError:
        raise ShapeError(f"scatter_replace_rows: rows {rows.shape} do not fit {target_shape}") from None

    def backward(g):
        gb = g.copy()
        gb[key] = 0.0
        return gb, _unbroadcast(g[key], rows.shape)

    return _make(out, (base, rows), backward)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    return axis % ndim


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    ax = _norm_axis(axis, a.value.ndim)

    def backward(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.value.sum(axis=ax, keepdims=keepdims)), (a,), backward)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def l2_norm(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Euclidean norm over ``axis`` (all entries when ``axis`` is None)."""
    a = as_tensor(a)
    ax = _norm_axis(axis, a.value.ndim)
    x = a.value
    n = np.sqrt(np.sum(x * x, axis=ax, keepdims=True))

    def backward(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        with np.errstate(invalid="ignore", divide="ignore"):
            d = np.where(n > 0, x / n, 0.0)
        return (g * d,)

    out = n if keepdims else (n.reshape(()) if ax is None else np.squeeze(n, axis=ax))
    return _make(np.asarray(out), (a,), backward)


def squared_error(a, b, axis: int | None = None) -> Tensor:
    """Sum of squared differences over ``axis`` (everything when None)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("squared_error", a, b)
    diff = a.value - b.value
    ax = _norm_axis(axis, diff.ndim)

    def backward(g):
        if ax is not None:
            g = np.expand_dims(g, ax)
        gd = 2.0 * g * diff
        return _unbroadcast(gd, a.shape), _unbroadcast(-gd, b.shape)

    return _make(np.asarray(np.sum(diff * diff, axis=ax)), (a, b), backward)


def logsumexp(a, axis: int = -1) -> Tensor:
    """Overflow-safe log-sum-exp along ``axis``."""
    a = as_tensor(a)
    x = a.value
    ax = axis % x.ndim
    m = np.max(x, axis=ax, keepdims=True)
    e = np.exp(x - m)
    s = np.sum(e, axis=ax, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=ax)

    def backward(g):
        return (np.expand_dims(g, ax) * (e / s),)

    return _make(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Row-wise softmax (last axis by default)."""
    a = as_tensor(a)
    x = a.value
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    p = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _make(p, (a,), backward)


def layer_norm(a, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Per-token normalization over the last axis followed by ``gain * x + bias``."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    if gain.shape != (a.shape[-1],) or bias.shape != (a.shape[-1],):
        raise ShapeError(f"layer_norm: input {a.shape} vs gain {gain.shape} / bias {bias.shape}")
    x = a.value
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value

    def backward(g):
        gx_hat = g * gv
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    out = (xhat * gv + bias.value).astype(x.dtype, copy=False)
    return _make(out, (a, gain, bias), backward)


# ---------------------------------------------------------------------------
# backward


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    The recorded graph is released afterwards; calling again on the same graph
    raises :class:`TapeError`.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._released:
        raise TapeError("backward: graph already consumed; recompute the forward pass")
    if not loss.requires_grad:
        raise TapeError("backward: loss does not depend on any tensor requiring grad")
    if loss.is_leaf:
        loss.grad = loss.grad + np.ones_like(loss.value)
        return
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if node._released:
                raise TapeError("backward: graph already consumed")
            if g is not None:
                node.grad = node.grad + g
            continue
        if node._released:
            raise TapeError("backward: graph already consumed; recompute the forward pass")
        if g is not None:
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if not p.requires_grad or pg is None:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        node._backward = None
        node._released = True


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the list of parameter tensors to a scalar tensor. Parameters are
    promoted to float64. Relative error per entry is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    params = [Tensor(np.array(p.value, dtype=np.float64), requires_grad=True) for p in params]
    first = float(f(params).value)
    second = f(params)
    if float(second.value) != first:
        raise ContractError("grad_check: f is not deterministic (two evaluations differ)")
    backward(second)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            with no_grad():
                fp = float(f(params).value)
            flat[k] = orig - h
            with no_grad():
                fm = float(f(params).value)
            flat[k] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic.reshape(-1)[k])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
