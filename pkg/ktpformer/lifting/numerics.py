"""
Dense float64 tensors with reverse-mode differentiation.

Every differentiable operation records a node (operation tag, parent tensors and
the intermediates its backward rule needs). `backward()` replays the recorded
graph in reverse topological order and accumulates gradients into leaves.

Backward rules are looked up in `BACKWARD_RULES` by operation tag at replay time,
so a rule can be swapped out (the gradient-audit tests rely on this).
"""

import logging
import threading
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from .exceptions import NumericalError, ShapeMismatchError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


@contextmanager
def no_grad():
    """Evaluate without recording nodes (inference)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """
    An n-dimensional float64 array that may participate in differentiation.

    Leaves created with ``requires_grad=True`` own a zero-initialised gradient
    buffer of the same shape; `backward()` adds into it.
    """

    __slots__ = ('value', 'grad', 'requires_grad', 'op', 'parents', 'saved', 'name')

    def __init__(self, value: ArrayLike, requires_grad: bool = False, op: str = 'leaf',
                 parents: Tuple['Tensor', ...] = (), saved: Optional[Dict[str, Any]] = None,
                 name: Optional[str] = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = parents
        self.saved = saved or {}
        self.name = name
        self.grad = np.zeros_like(self.value) if (self.requires_grad and op == 'leaf') else None

    # shape helpers

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return int(self.value.size)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> 'Tensor':
        return Tensor(self.value.copy())

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}, op={self.op!r}{label})"

    # operator sugar

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return getitem(self, key)


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value: ArrayLike, name: Optional[str] = None) -> Tensor:
    """Create a differentiable leaf."""
    return Tensor(np.array(value, dtype=DTYPE, copy=True), requires_grad=True, name=name)


def _record(value: np.ndarray, op: str, parents: Tuple[Tensor, ...], **saved: Any) -> Tensor:
    tracked = is_grad_enabled() and any(p.requires_grad for p in parents)
    if not tracked:
        return Tensor(value)
    return Tensor(value, requires_grad=True, op=op, parents=parents, saved=saved)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes that broadcasting expanded so it matches `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: operands cannot be broadcast", a.shape, b.shape) from None


# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast('add', a, b)
    return _record(a.value + b.value, 'add', (a, b))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast('sub', a, b)
    return _record(a.value - b.value, 'sub', (a, b))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast('mul', a, b)
    return _record(a.value * b.value, 'mul', (a, b))


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    return _record(x.value * factor, 'scale', (x,), factor=float(factor))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _record(x.value * x.value, 'square', (x,))


def gelu(x) -> Tensor:
    """Gaussian error linear unit, exact erf form."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.value / np.sqrt(2.0)))
    return _record(x.value * cdf, 'gelu', (x,), cdf=cdf)


# linear algebra and layout

def matmul(a, b) -> Tensor:
    """
    Matrix product over the last two axes, broadcasting any leading axes.

    Raises:
        ShapeMismatchError: if the inner extents differ.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul: inner extents do not match", a.shape, b.shape)
    try:
        value = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeMismatchError("matmul: leading axes cannot be broadcast", a.shape, b.shape) from None
    return _record(value, 'matmul', (a, b))


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatchError(f"transpose: axes {axes} are not a permutation", x.shape)
    return _record(np.transpose(x.value, axes), 'transpose', (x,), axes=axes)


permute = transpose


def swap_last(x) -> Tensor:
    axes = list(range(as_tensor(x).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        value = x.value.reshape(tuple(shape))
    except ValueError:
        raise ShapeMismatchError(f"reshape: cannot view as {tuple(shape)}", x.shape) from None
    return _record(value, 'reshape', (x,))


def concat_lastaxis(tensors: Sequence) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeMismatchError("concat: nothing to concatenate")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeMismatchError("concat: leading extents differ", tensors[0].shape, t.shape)
    widths = [t.shape[-1] for t in tensors]
    return _record(np.concatenate([t.value for t in tensors], axis=-1), 'concat', tensors, widths=widths)


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    return _record(x.value[key], 'getitem', (x,), key=key)


# reductions

def sum(x, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return _record(np.sum(x.value, axis=axis, keepdims=keepdims), 'sum', (x,), axis=axis, keepdims=keepdims)


def mean(x, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    value = np.mean(x.value, axis=axis, keepdims=keepdims)
    count = x.size // max(np.size(value), 1) if x.size else 1
    return _record(value, 'mean', (x,), axis=axis, keepdims=keepdims, count=count)


def norm_lastaxis(x) -> Tensor:
    """Euclidean norm over the last axis. The subgradient at a zero vector is zero."""
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.value * x.value, axis=-1))
    return _record(norm, 'norm', (x,), norm=norm)


# normalisations

def softmax_lastaxis(x) -> Tensor:
    """
    Softmax over the last axis, stabilised by subtracting the slice maximum.

    Raises:
        NumericalError: if the input contains NaN.
    """
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeMismatchError("softmax: last axis is empty", x.shape)
    if np.isnan(x.value).any():
        raise NumericalError("softmax: NaN in input")
    shifted = x.value - np.max(x.value, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True)
    return _record(y, 'softmax', (x,), y=y)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise each last-axis slice to zero mean and unit variance, then apply gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatchError("layer_norm: gain/bias must match the last axis", x.shape, gain.shape, bias.shape)
    if eps < 0:
        raise ValueError("layer_norm: eps must be non-negative")
    mu = np.mean(x.value, axis=-1, keepdims=True)
    centred = x.value - mu
    var = np.mean(centred * centred, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std
    return _record(xhat * gain.value + bias.value, 'layer_norm', (x, gain, bias), xhat=xhat, inv_std=inv_std)


# backward rules: (node, upstream grad) -> one gradient (or None) per parent

def _add_rule(node, g):
    a, b = node.parents
    return unbroadcast(g, a.shape), unbroadcast(g, b.shape)


def _sub_rule(node, g):
    a, b = node.parents
    return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)


def _mul_rule(node, g):
    a, b = node.parents
    return unbroadcast(g * b.value, a.shape), unbroadcast(g * a.value, b.shape)


def _scale_rule(node, g):
    return (g * node.saved['factor'],)


def _square_rule(node, g):
    return (2.0 * g * node.parents[0].value,)


def _gelu_rule(node, g):
    x = node.parents[0].value
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return (g * (node.saved['cdf'] + x * pdf),)


def _matmul_rule(node, g):
    a, b = node.parents
    ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
    gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
    return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


def _transpose_rule(node, g):
    return (np.transpose(g, np.argsort(node.saved['axes'])),)


def _reshape_rule(node, g):
    return (g.reshape(node.parents[0].shape),)


def _concat_rule(node, g):
    bounds = np.cumsum(node.saved['widths'])[:-1]
    return tuple(np.split(g, bounds, axis=-1))


def _getitem_rule(node, g):
    out = np.zeros(node.parents[0].shape, dtype=DTYPE)
    np.add.at(out, node.saved['key'], g)
    return (out,)


def _expand_reduced(node, g):
    axis, keepdims = node.saved['axis'], node.saved['keepdims']
    shape = node.parents[0].shape
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _sum_rule(node, g):
    return (np.array(_expand_reduced(node, g)),)


def _mean_rule(node, g):
    return (_expand_reduced(node, g) / node.saved['count'],)


def _norm_rule(node, g):
    x = node.parents[0].value
    norm = node.saved['norm']
    safe = np.where(norm > 0, norm, 1.0)
    factor = np.where(norm > 0, g / safe, 0.0)
    return (factor[..., None] * x,)


def _softmax_rule(node, g):
    y = node.saved['y']
    return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)


def _layer_norm_rule(node, g):
    x, gain, bias = node.parents
    xhat, inv_std = node.saved['xhat'], node.saved['inv_std']
    lead = tuple(range(g.ndim - 1))
    dxhat = g * gain.value
    dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)


BACKWARD_RULES: Dict[str, Callable[[Tensor, np.ndarray], Tuple[Optional[np.ndarray], ...]]] = {
    'add': _add_rule,
    'sub': _sub_rule,
    'mul': _mul_rule,
    'scale': _scale_rule,
    'square': _square_rule,
    'gelu': _gelu_rule,
    'matmul': _matmul_rule,
    'transpose': _transpose_rule,
    'reshape': _reshape_rule,
    'concat': _concat_rule,
    'getitem': _getitem_rule,
    'sum': _sum_rule,
    'mean': _mean_rule,
    'norm': _norm_rule,
    'softmax': _softmax_rule,
    'layer_norm': _layer_norm_rule,
}


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Populate ``grad`` on every differentiable leaf reachable from `loss`.

    Gradients accumulate (+=); call `zero_grad` on leaves before replaying a
    tape to reproduce the same values.

    Raises:
        ShapeMismatchError: if `loss` is not a scalar.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeMismatchError("backward: loss must be a scalar", loss.shape)
    if not loss.requires_grad:
        return
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.op == 'leaf':
            node.grad += g
            continue
        grads = BACKWARD_RULES[node.op](node, g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = np.array(pg, dtype=DTYPE)


def zero_grads(leaves: Iterable[Tensor]) -> None:
    for leaf in leaves:
        leaf.zero_grad()
