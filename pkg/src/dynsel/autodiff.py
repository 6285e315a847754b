"""Dense tensors with tape-based reverse-mode differentiation.

Operations record a node whenever an operand requires gradients.  Two entry
points run the reverse sweep:

* ``Tensor.backward()`` accumulates into ``.grad`` of every leaf that requires
  gradients (repeated calls accumulate; use :func:`zero_grad`).
* :func:`grad` returns gradients for an explicit list of tensors and leaves all
  ``.grad`` fields untouched.  Attacks use this against frozen models.

Numpy broadcasting is supported; gradients are summed back onto the operand
shape.  Higher-order derivatives are not.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics

__all__ = [
    "Tensor",
    "ShapeError",
    "ContractError",
    "tensor",
    "as_tensor",
    "grad",
    "no_grad",
    "zero_grad",
    "finite_diff_check",
    "matmul",
    "relu",
    "softplus",
    "sigmoid",
    "exp",
    "log",
    "abs_",
    "clamp",
    "lgamma",
    "digamma",
    "concat",
    "stack",
    "conv2d",
    "max_",
    "log_softmax",
]


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __float__(self):
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        leaves = [t for t in _topo(self) if t.is_leaf and t.requires_grad]
        grads = _reverse_sweep(self, leaves)
        for leaf, g in zip(leaves, grads):
            if leaf.grad is None:
                leaf.grad = g.copy()
            else:
                leaf.grad = leaf.grad + g

    # -- operators ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def max(self, axis=-1, keepdims=False):
        return max_(self, axis, keepdims)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _reverse_sweep(root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    order = _topo(root)
    targets = {id(t) for t in wrt}
    relevant = set()
    for node in order:  # parents precede children
        if id(node) in targets or any(id(p) in relevant for p in node._parents):
            relevant.add(id(node))
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if id(node) not in targets else grads.get(id(node))
        if g is None or not node._parents or id(node) not in relevant:
            continue
        needs = tuple(id(p) in relevant for p in node._parents)
        parent_grads = node._backward(g, needs)
        for p, need, pg in zip(node._parents, needs, parent_grads):
            if not need or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def grad(root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``root`` with respect to each tensor in ``wrt``."""
    if root.data.size != 1:
        raise ContractError(f"grad() needs a scalar root, got shape {root.shape}")
    return _reverse_sweep(root, list(wrt))


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _node(a.data + b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g, needs: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g, needs):
        return (_unbroadcast(g / b.data, a.shape) if needs[0] else None,
                _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None)

    return _node(out, (a, b), bw)


def power(a, k: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data ** k, (a,), lambda g, needs: (g * k * a.data ** (k - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g, needs: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g, needs: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g, needs: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g, needs: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """ln(1 + e^x), evaluated stably."""
    a = as_tensor(a)
    return _node(np.logaddexp(0.0, a.data), (a,), lambda g, needs: (g * _sigmoid(a.data),))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g, needs: (g * np.sign(a.data),))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _node(out, (a,), lambda g, needs: (g * inside,))


def lgamma(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.asarray(numerics.lgamma(a.data)), (a,),
                 lambda g, needs: (g * numerics.digamma(a.data),))


def digamma(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.asarray(numerics.digamma(a.data)), (a,),
                 lambda g, needs: (g * numerics.trigamma(a.data),))


# -- reductions and shape ---------------------------------------------------

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def max_(a, axis=-1, keepdims=False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximiser."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bw(g, needs):
        gg = g if keepdims else np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), gg, axis=axis)
        return (full,)

    return _node(out, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _node(out, (a,), lambda g, needs: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g, needs: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g, needs):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, ts, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis=axis)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    z = a - shift
    return z - log(sum_(exp(z), axis=axis, keepdims=True))


# -- linear algebra ---------------------------------------------------------

def _blocked_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # One 2-D product per leading block: a block's result never depends on its
    # neighbours, so identical blocks give bit-identical outputs.
    lead = a.shape[0]
    rows = a.shape[1:-1]
    out = np.empty((lead,) + rows + (b.shape[-1],))
    for i in range(lead):
        out[i] = (a[i].reshape(-1, a.shape[-1]) @ b).reshape(rows + (b.shape[-1],))
    return out


def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics.

    A left operand with ndim > 2 against a 2-D right operand is computed block
    by block over its leading axis (the ensemble-member axis in this package).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    blocked = a.ndim > 2 and b.ndim == 2
    out = _blocked_matmul(a.data, b.data) if blocked else np.matmul(a.data, b.data)

    def bw(g, needs):
        ga = gb = None
        if blocked:
            if needs[0]:
                ga = _blocked_matmul(g, b.data.T)
            if needs[1]:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        if a.ndim == 1 or b.ndim == 1:
            a2 = a.data if a.ndim > 1 else a.data[None, :]
            b2 = b.data if b.ndim > 1 else b.data[:, None]
            g2 = g
            if a.ndim == 1:
                g2 = np.expand_dims(g2, -2)
            if b.ndim == 1:
                g2 = np.expand_dims(g2, -1)
            if needs[0]:
                ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(a.shape)
            if needs[1]:
                gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(b.shape)
            return ga, gb
        if needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if needs[1]:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(out, (a, b), bw)


def _conv_forward(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    # x (B, C, H, W), w (O, C, k, k)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    k = w.shape[-1]
    cols = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    # cols (B, C, H', W', k, k)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, H', W', O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x, w, padding: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation.

    ``x`` is (B, C, H, W) or (G, B, C, H, W); the 5-D form convolves each
    leading group separately.  ``w`` is (O, C, k, k) with small odd ``k``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim not in (4, 5) or w.ndim != 4 or x.shape[-3] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    k = w.shape[-1]
    grouped = x.ndim == 5
    xs = x.data if grouped else x.data[None]
    out = np.stack([_conv_forward(xs[i], w.data, padding) for i in range(xs.shape[0])])

    def bw(g, needs):
        gs = g if grouped else g[None]
        gx = gw = None
        if needs[0]:
            gx = np.zeros_like(xs)
            hp = xs.shape[-2] + 2 * padding
            wp = xs.shape[-1] + 2 * padding
            for gi in range(xs.shape[0]):
                acc = np.zeros(xs.shape[1:3] + (hp, wp))
                ho, wo = gs.shape[-2], gs.shape[-1]
                for i in range(k):
                    for j in range(k):
                        acc[:, :, i:i + ho, j:j + wo] += np.einsum("bohw,oc->bchw", gs[gi], w.data[:, :, i, j])
                gx[gi] = acc[:, :, padding:hp - padding, padding:wp - padding]
            if not grouped:
                gx = gx[0]
        if needs[1]:
            gw = np.zeros_like(w.data)
            for gi in range(xs.shape[0]):
                xp = xs[gi]
                if padding:
                    xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
                cols = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
                gw += np.tensordot(gs[gi], cols, axes=([0, 2, 3], [0, 2, 3]))
        return gx, gw

    return _node(out if grouped else out[0], (x, w), bw)


# -- gradient oracle --------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` must be deterministic: a function that draws fresh randomness between
    the two probes is not reliably detected.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-7, 1e-3]")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(base, requires_grad=True)
    (analytic,) = grad(f(xt), [xt])
    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(Tensor(base)).data)
        flat[i] = orig - step
        fm = float(f(Tensor(base)).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * step)
    err = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)
    return float(err.max()) if err.size else 0.0
