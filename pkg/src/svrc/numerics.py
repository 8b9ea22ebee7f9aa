"""Small reverse-mode autodiff engine on top of numpy (float64 throughout).

Every differentiable operation is a function that returns a new `Tensor`
carrying references to its parents and a closure mapping the upstream
gradient to one gradient per parent. `backward` walks the graph in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate operations without recording a graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    a = as_tensor(a)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


# ------------------------------------------------------------ elementwise math


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _node(out, (a,), lambda g: (g * special.expit(a.data),), "softplus")


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _node(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero where clipping is active."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = out == a.data
    return _node(out, (a,), lambda g: (g * inside,), "clamp")


def lower_bound(a: Tensor, bound: float) -> Tensor:
    """max(a, bound) whose gradient still flows where it would raise `a`.

    Below the bound the upstream gradient is passed through only when it is
    negative (descent would push the value up, off the bound), so a floored
    quantity can recover instead of being stuck with a zero gradient.
    """
    a = as_tensor(a)
    out = np.maximum(a.data, bound)
    return _node(out, (a,), lambda g: (np.where((a.data >= bound) | (g < 0), g, 0.0),), "lower_bound")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def normal_pdf(x: np.ndarray) -> np.ndarray:
    return _INV_SQRT2PI * np.exp(-0.5 * x * x)


def normal_cdf_array(x: np.ndarray) -> np.ndarray:
    # erfc keeps full relative precision in the lower tail
    return 0.5 * special.erfc(-np.asarray(x, dtype=np.float64) * _INV_SQRT2)


def normal_cdf(a: Tensor) -> Tensor:
    """Standard Gaussian CDF; derivative is the Gaussian pdf."""
    a = as_tensor(a)
    return _node(normal_cdf_array(a.data), (a,), lambda g: (g * normal_pdf(a.data),), "normal_cdf")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select `a` where mask is true, else `b` (mask is a constant)."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return _node(
        np.where(mask, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)),
        "where",
    )


# ----------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out, dtype=np.float64), (a,), _back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------- shape and indexing


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)

    def _back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(a.data[index]), (a,), _back, "getitem")


def take(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather entries of a 1-D tensor at integer `indices` (any shape)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)

    def _back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, indices, g)
        return (full,)

    return _node(a.data[indices], (a,), _back, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, _back, "concat")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product following numpy.matmul (both operands >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)

    def _back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(np.matmul(a.data, b.data), (a, b), _back, "matmul")


def cumsum(a: Tensor) -> Tensor:
    """Cumulative sum of a 1-D tensor."""
    a = as_tensor(a)
    return _node(np.cumsum(a.data), (a,), lambda g: (np.cumsum(g[::-1])[::-1],), "cumsum")


# ---------------------------------------------------------------- convolution


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct (im2col) 2-D convolution, NCHW input, weight shaped (out, in, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    k = weight.shape[2]
    xp = _pad_hw(x.data, padding)
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    ho, wo = out.shape[2], out.shape[3]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def _back(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.tensordot(g, weight.data, axes=([1], [0]))  # (B, Ho, Wo, C, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + x.shape[2], padding : padding + x.shape[3]]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _node(out, parents, _back, "conv2d")


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed convolution (adjoint of `conv2d`), weight shaped (in, out, k, k).

    Output extent is (H - 1) * stride - 2 * padding + k + output_padding.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bsz, _, h, w = x.shape
    k = weight.shape[2]
    c_out = weight.shape[1]
    full_h = (h - 1) * stride + k + output_padding
    full_w = (w - 1) * stride + k + output_padding
    out_h = full_h - 2 * padding
    out_w = full_w - 2 * padding

    cols = np.tensordot(x.data, weight.data, axes=([1], [0]))  # (B, H, W, O, k, k)
    full = np.zeros((bsz, c_out, full_h, full_w))
    for i in range(k):
        for j in range(k):
            full[:, :, i : i + stride * h : stride, j : j + stride * w : stride] += cols[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    out = full[:, :, padding : padding + out_h, padding : padding + out_w]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def _back(g):
        gfull = np.zeros((bsz, c_out, full_h, full_w))
        gfull[:, :, padding : padding + out_h, padding : padding + out_w] = g
        win = sliding_window_view(gfull, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h, :w]
        gx = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _node(out, parents, _back, "conv_transpose2d")


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "subtract": sub,
    "multiply": mul,
    "divide": div,
    "scalar_multiply": scale,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "square": square,
    "sum": sum,
    "mean": mean,
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "leaky_relu": leaky_relu,
    "clamp": clamp,
    "lower_bound": lower_bound,
    "normal_cdf": normal_cdf,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "where": where,
    "take": take,
    "getitem": getitem,
    "concat": concat,
    "cumsum": cumsum,
    "reshape": reshape,
    "transpose": transpose,
    "matmul": matmul,
}


def primitive_set() -> dict[str, Callable[..., Tensor]]:
    """Catalog of differentiable primitives, keyed by name."""
    return dict(PRIMITIVES)


# ------------------------------------------------------------------- backward


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from `root`, parents before children."""
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every tensor with requires_grad reachable from `loss`."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        # free the closure so large intermediates can be collected
        node._backward = None
        node._parents = ()


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient estimate of scalar `f` at `x`."""
    if h <= 0:
        raise ValueError("step size must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
