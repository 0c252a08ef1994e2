"""Array-valued reverse-mode differentiation for the operations the losses and
encoders use.

Each :class:`Tensor` records its parents and a closure mapping the upstream
gradient to one gradient per parent.  :meth:`Tensor.backward` walks the graph
in reverse topological order.  This is not a general tape: only the operations
defined here are differentiable.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import UnknownParameterError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    __array_priority__ = 100.0

    def __init__(self, data, parents: tuple["Tensor", ...] = (), backward=None, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, gradient: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor."""
        if gradient is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            gradient = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(gradient, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar ---------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(data) -> Tensor:
    """Leaf tensor that collects a gradient."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data**exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor(out, (a,), lambda g: (0.5 * g / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor(a.data * sig, (a,), lambda g: (g * sig * (1.0 + a.data * (1.0 - sig)),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero wherever the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# -- linear algebra -----------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(np.matmul(a.data, b.data), (a, b), backward)


def einsum(subscripts: str, *operands) -> Tensor:
    """Explicit-output einsum.

    Every index of an operand must also appear in another operand or in the
    output, and no operand may repeat an index.
    """
    ops = [as_tensor(o) for o in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ValueError("subscript count does not match operand count")
    for k, s in enumerate(in_subs):
        if len(set(s)) != len(s):
            raise ValueError(f"repeated index in operand {k}: {s!r}")
        others = set(out_sub).union(*(in_subs[j] for j in range(len(in_subs)) if j != k))
        if not set(s) <= others:
            raise ValueError(f"operand {k} has an index summed only within itself")
    out = np.einsum(subscripts, *(o.data for o in ops))

    def backward(g):
        grads = []
        for k in range(len(ops)):
            rest = [in_subs[j] for j in range(len(ops)) if j != k]
            spec = ",".join(rest + [out_sub]) + "->" + in_subs[k]
            grads.append(np.einsum(spec, *(ops[j].data for j in range(len(ops)) if j != k), g))
        return tuple(grads)

    return Tensor(out, tuple(ops), backward)


# -- reductions and shape -------------------------------------------------------
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) / float(count)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max-shifted log-sum-exp."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = m + np.log(total)
    soft = shifted / total

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return Tensor(out if keepdims else np.squeeze(out, axis=axis), (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    return exp(a - logsumexp(a, axis=axis, keepdims=True))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the result is always C-contiguous."""
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
    )


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(a, axes)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return Tensor(
        np.concatenate([t.data for t in ts], axis=axis),
        tuple(ts),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def getitem(a, key) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return Tensor(a.data[key], (a,), backward)


def diagonal(a) -> Tensor:
    """Main diagonal of a square matrix."""
    n = a.shape[0]
    idx = np.arange(n)
    return getitem(a, (idx, idx))


def segment_sum(a, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given by ``segment_ids``."""
    a = as_tensor(a)
    ids = np.asarray(segment_ids, dtype=np.intp)
    out = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(out, ids, a.data)
    return Tensor(out, (a,), lambda g: (g[ids],))


def segment_mean(a, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Mean per segment; empty segments give zero."""
    counts = np.bincount(np.asarray(segment_ids, dtype=np.intp), minlength=num_segments).astype(np.float64)
    counts = np.maximum(counts, 1.0).reshape((num_segments,) + (1,) * (as_tensor(a).ndim - 1))
    return segment_sum(a, segment_ids, num_segments) / counts


def conv3d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation.

    x: (B, C, D, H, W); w: (O, C, k, k, k).  Returns (B, O, D', H', W').
    """
    x, w = as_tensor(x), as_tensor(w)
    B, C = x.shape[:2]
    O, Cw, k = w.shape[0], w.shape[1], w.shape[2]
    if Cw != C:
        raise ValueError(f"conv3d channel mismatch: input {C}, kernel {Cw}")
    xp = np.pad(x.data, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    windows = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    Do, Ho, Wo = windows.shape[2:5]
    # (B, Do, Ho, Wo, C, k, k, k) -> rows of patches
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(B * Do * Ho * Wo, C * k**3)
    wmat = w.data.reshape(O, C * k**3)
    out = (cols @ wmat.T).reshape(B, Do, Ho, Wo, O).transpose(0, 4, 1, 2, 3)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, O)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wmat).reshape(B, Do, Ho, Wo, C, k, k, k)
        gxp = np.zeros_like(xp)
        span = lambda start, n: slice(start, start + stride * (n - 1) + 1, stride)  # noqa: E731
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    gxp[:, :, span(a, Do), span(b, Ho), span(c, Wo)] += gcols[..., a, b, c].transpose(0, 4, 1, 2, 3)
        if padding:
            gxp = gxp[:, :, padding:-padding, padding:-padding, padding:-padding]
        return gxp, gw

    return Tensor(np.ascontiguousarray(out), (x, w), backward)


# -- loss graphs ---------------------------------------------------------------
class LossGraph:
    """Named parameters, a scalar loss built from them, and its gradients.

    ``fn`` receives a mapping of parameter name to :class:`Tensor` and must
    return a scalar :class:`Tensor`.
    """

    def __init__(self, fn: Callable[[Mapping[str, Tensor]], Tensor], parameters: Mapping[str, np.ndarray]):
        self.fn = fn
        self.parameters = {k: np.array(v, dtype=np.float64) for k, v in parameters.items()}
        self.loss: float | None = None
        self.gradients: dict[str, np.ndarray] = {}

    def forward(self) -> float:
        leaves = {k: parameter(v) for k, v in self.parameters.items()}
        out = self.fn(leaves)
        if not isinstance(out, Tensor):
            out = Tensor(out)
        if out.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {out.shape}")
        if out.requires_grad:
            out.backward()
        self.loss = float(out.data)
        self.gradients = {
            k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()
        }
        return self.loss


def grad_of(graph: LossGraph, wrt: str) -> np.ndarray:
    """Gradient of the graph's loss with respect to parameter ``wrt``."""
    if wrt not in graph.parameters:
        raise UnknownParameterError(wrt)
    if graph.loss is None:
        graph.forward()
    return graph.gradients[wrt]
