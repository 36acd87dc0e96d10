"""Dense tensor with tape-style reverse-mode automatic differentiation.

The graph is recorded while the forward pass runs: every op output keeps a
reference to its parents and a closure that maps the output gradient to parent
gradients. :meth:`Tensor.backward` walks the graph once in reverse topological
order and then releases it.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from adnet.errors import ContractError, DimensionError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, Tensor):
        value = value.data
    arr = np.asarray(value)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    return np.ascontiguousarray(arr)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        needs = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autodiff -------------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Only scalar tensors may be differentiated without an explicit seed.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad, self.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != {self.shape}")
        if not self.requires_grad:
            return

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            # tape is consumed; release intermediate buffers
            node._parents = ()
            node._backward = None

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        other = _lift(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return unbroadcast(g, a_shape), unbroadcast(g, b_shape)

        return Tensor._make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return unbroadcast(g, a_shape), unbroadcast(-g, b_shape)

        return Tensor._make(self.data - other.data, (self, other), backward)

    def __rsub__(self, other):
        return _lift(other, self.dtype) - self

    def __mul__(self, other):
        other = _lift(other, self.dtype)
        a, b = self.data, other.data

        def backward(g):
            return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)

        return Tensor._make(a * b, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other, self.dtype)
        a, b = self.data, other.data

        def backward(g):
            return unbroadcast(g / b, a.shape), unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._make(a / b, (self, other), backward)

    def __rtruediv__(self, other):
        return _lift(other, self.dtype) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("tensor exponents are not supported")
        a = self.data

        def backward(g):
            return (g * exponent * a ** (exponent - 1),)

        return Tensor._make(a**exponent, (self,), backward)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops -------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {src} into {shape}") from exc
        return Tensor._make(out, (self,), lambda g: (g.reshape(src),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        out = np.ascontiguousarray(self.data.transpose(axes))
        return Tensor._make(out, (self,), lambda g: (g.transpose(inv),))

    def __getitem__(self, index):
        src_shape, dtype = self.shape, self.dtype

        basic = all(isinstance(i, (slice, int)) or i is Ellipsis or i is None
                    for i in (index if isinstance(index, tuple) else (index,)))

        def backward(g):
            full = np.zeros(src_shape, dtype=dtype)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor._make(np.ascontiguousarray(self.data[index]), (self,), backward)

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        src = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis=None, keepdims: bool = False):
        """Maximum with the gradient routed to the first maximal element."""
        a = self.data
        if axis is None:
            flat = int(np.argmax(a))
            out = np.asarray(a.reshape(-1)[flat])

            def backward(g):
                full = np.zeros(a.size, dtype=a.dtype)
                full[flat] = g.reshape(-1)[0]
                return (full.reshape(a.shape),)

            return Tensor._make(out.reshape((1,) * a.ndim) if keepdims else out, (self,), backward)

        idx = np.expand_dims(np.argmax(a, axis=axis), axis)
        out = np.take_along_axis(a, idx, axis=axis)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            full = np.zeros_like(a)
            np.put_along_axis(full, idx, g, axis=axis)
            return (full,)

        return Tensor._make(out if keepdims else out.squeeze(axis), (self,), backward)

    # -- elementwise functions ------------------------------------------------

    def abs(self):
        a = self.data
        return Tensor._make(np.abs(a), (self,), lambda g: (g * np.sign(a),))

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self):
        a = self.data
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),))

    def clip(self, lo: float, hi: float):
        a = self.data
        inside = (a >= lo) & (a <= hi)
        return Tensor._make(np.clip(a, lo, hi), (self,), lambda g: (g * inside,))

    def astype(self, dtype):
        src = self.dtype
        return Tensor._make(self.data.astype(dtype), (self,), lambda g: (g.astype(src),))


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting rules)."""
    a, b = _lift(a, None), _lift(b, None)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return unbroadcast(ga, x.shape), unbroadcast(gb, y.shape)

    return Tensor._make(x @ y, (a, b), backward)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t, None) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(out, tensors, backward)


def maximum_over(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise maximum across equally shaped tensors; ties go to the first."""
    stacked = np.stack([t.data for t in tensors])
    winner = np.argmax(stacked, axis=0)

    def backward(g):
        return tuple(g * (winner == i) for i in range(len(tensors)))

    return Tensor._make(stacked.max(axis=0), tuple(tensors), backward)


def pad2d(x: Tensor, pad: int, mode: str = "constant") -> Tensor:
    """Pad the two trailing axes by ``pad`` on every side.

    ``mode`` follows numpy: ``constant`` (zeros), ``edge`` (replicate) or
    ``reflect`` (mirror without repeating the border sample).
    """
    if pad == 0:
        return x
    h, w = x.shape[-2:]
    if mode == "constant":
        data = np.pad(x.data, [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)])

        def backward(g):
            return (g[..., pad:pad + h, pad:pad + w],)

        return Tensor._make(data, (x,), backward)

    rows = np.pad(np.arange(h), pad, mode=mode)
    cols = np.pad(np.arange(w), pad, mode=mode)
    data = x.data[..., rows[:, None], cols[None, :]]

    def backward(g):
        gh = np.zeros(g.shape[:-2] + (h, g.shape[-1]), dtype=g.dtype)
        np.add.at(gh, (Ellipsis, rows, slice(None)), g)
        gw = np.zeros(g.shape[:-2] + (h, w), dtype=g.dtype)
        np.add.at(gw, (Ellipsis, slice(None), cols), gh)
        return (gw,)

    return Tensor._make(np.ascontiguousarray(data), (x,), backward)
