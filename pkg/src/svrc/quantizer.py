"""STanH parametric quantizer.

A layer with ``L`` levels holds ``L - 1`` positive step weights ``w`` and
``L - 1`` increasing boundaries ``b``. During training the quantizer is the
smooth sum of shifted tanh steps; at inference it is the exact ladder whose
levels start at ``-sum(w) / 2`` and climb by ``w``.

For gradient descent a layer is reparameterized as ``raw_w`` (log of the
step weights) and ``raw_f`` (logit of where each boundary sits between its two
neighbouring levels). The map keeps ``w > 0``, keeps ``b`` increasing and keeps
every level strictly inside its own interval, with exactly ``2 (L - 1)``
trainable scalars.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import numerics as nx
from .numerics import Tensor

STANH_MAGIC = b"STNH"
STANH_VERSION = 1


@dataclass(frozen=True, eq=False)
class StanhLayer:
    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64).reshape(-1)
        b = np.array(self.b, dtype=np.float64).reshape(-1)
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", b)
        if w.shape != b.shape:
            raise ValueError(f"w and b must have the same length, got {w.size} and {b.size}")
        if w.size < 1:
            raise ValueError("a layer needs at least 2 levels")

    @property
    def L(self) -> int:
        return self.w.size + 1

    @property
    def num_parameters(self) -> int:
        return self.w.size + self.b.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, StanhLayer):
            return NotImplemented
        return np.array_equal(self.w, other.w) and np.array_equal(self.b, other.b)

    def __repr__(self) -> str:
        return f"StanhLayer(L={self.L}, span=[{self.levels[0]:.4g}, {self.levels[-1]:.4g}])"

    @property
    def levels(self) -> np.ndarray:
        return reconstruction_levels(self)

    def check(self) -> None:
        """Raise ValueError unless w > 0, b increasing and levels inside their intervals."""
        if not np.all(np.isfinite(self.w)) or not np.all(np.isfinite(self.b)):
            raise ValueError("non-finite quantizer parameters")
        if np.any(self.w <= 0):
            raise ValueError("step weights must be positive")
        if np.any(np.diff(self.b) <= 0):
            raise ValueError("boundaries must be strictly increasing")
        lv = self.levels
        if np.any(lv[:-1] >= self.b) or np.any(lv[1:] <= self.b):
            raise ValueError("every reconstruction level must lie strictly inside its interval")

    def digest(self) -> str:
        return hashlib.sha256(to_bytes(self)).hexdigest()[:16]

    # -- reparameterization

    def to_raw(self) -> tuple[np.ndarray, np.ndarray]:
        lv = self.levels
        frac = (self.b - lv[:-1]) / self.w
        return np.log(self.w), special.logit(frac)

    @classmethod
    def from_raw(cls, raw_w, raw_f) -> "StanhLayer":
        w = np.exp(np.asarray(raw_w, dtype=np.float64))
        frac = special.expit(np.asarray(raw_f, dtype=np.float64))
        lv = _levels_from_w(w)
        return cls(w, lv[:-1] + frac * w)


@dataclass(frozen=True)
class QuantizerGrid:
    """Levels plus per-level distances to the interval edges.

    ``left_bounds[0]`` and ``right_bounds[-1]`` are ``inf``: the outer
    intervals extend to minus/plus infinity.
    """

    levels: np.ndarray
    left_bounds: np.ndarray
    right_bounds: np.ndarray

    @property
    def L(self) -> int:
        return self.levels.size

    @property
    def edges(self) -> np.ndarray:
        """Interval edges, L + 1 values from -inf to +inf."""
        return np.concatenate([[-np.inf], self.levels[:-1] + self.right_bounds[:-1], [np.inf]])


def _prefix_sums(values) -> list[float]:
    """Running sums 0, v0, v0 + v1, ... with Neumaier compensation."""
    out = [0.0]
    total = comp = 0.0
    for v in values:
        t = total + v
        comp += (total - t) + v if abs(total) >= abs(v) else (v - t) + total
        total = t
        out.append(total + comp)
    return out


def _levels_from_w(w: np.ndarray) -> np.ndarray:
    """Levels -sum(w)/2 + (w_0 + ... + w_{k-1}), accurate to about one rounding.

    Level k equals (sum of the weights below it - sum of those above) / 2;
    both partial sums are compensated, so a symmetric ladder ends exactly
    at minus/plus its half span instead of drifting with L.
    """
    w = np.asarray(w, dtype=np.float64).tolist()
    below = _prefix_sums(w)
    above = _prefix_sums(w[::-1])[::-1]
    return 0.5 * (np.array(below) - np.array(above))


def reconstruction_levels(layer: StanhLayer) -> np.ndarray:
    return _levels_from_w(layer.w)


def init_uniform(L: int, lo: float, hi: float) -> StanhLayer:
    """Layer whose ladder is uniform on [lo, hi] with midpoint boundaries.

    Levels are always symmetric about zero (the first level is -sum(w)/2), so
    an asymmetric range is realised through its width only.
    """
    if L < 2:
        raise ValueError(f"need at least 2 levels, got {L}")
    if not lo < hi:
        raise ValueError(f"empty range [{lo}, {hi}]")
    step = (hi - lo) / (L - 1)
    w = np.full(L - 1, step)
    lv = _levels_from_w(w)
    return StanhLayer(w, 0.5 * (lv[:-1] + lv[1:]))


def integer_layer(L: int) -> StanhLayer:
    """Unit-step ladder (integer levels when L is odd)."""
    return init_uniform(L, -(L - 1) / 2, (L - 1) / 2)


def interval_bounds(layer: StanhLayer) -> QuantizerGrid:
    lv = reconstruction_levels(layer)
    left = np.concatenate([[np.inf], lv[1:] - layer.b])
    right = np.concatenate([layer.b - lv[:-1], [np.inf]])
    return QuantizerGrid(lv, left, right)


def interpolate(layer1: StanhLayer, layer2: StanhLayer, rho: float) -> StanhLayer:
    """Convex combination of two layers' weights and boundaries."""
    if layer1.L != layer2.L:
        raise ValueError(f"cannot interpolate layers with L={layer1.L} and L={layer2.L}")
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    return StanhLayer((1.0 - rho) * layer1.w + rho * layer2.w, (1.0 - rho) * layer1.b + rho * layer2.b)


# ---------------------------------------------------------------- hard path


def quantize_indices(y, layer: StanhLayer) -> np.ndarray:
    """Level index per element; a value on a boundary goes to the upper level."""
    y = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    return np.searchsorted(layer.b, y, side="right")


def hard_quantize(y, layer: StanhLayer) -> tuple[np.ndarray, np.ndarray]:
    idx = quantize_indices(y, layer)
    return reconstruction_levels(layer)[idx], idx


def uniform_step_quantize(y, delta: float) -> np.ndarray:
    """delta * round(y / delta), ties away from zero."""
    if delta <= 0:
        raise ValueError("step must be positive")
    y = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    q = y / delta
    return delta * np.sign(q) * np.floor(np.abs(q) + 0.5)


# ---------------------------------------------------------------- soft path


def stanh_forward(y: np.ndarray, w: np.ndarray, b: np.ndarray, beta: float) -> np.ndarray:
    out = np.zeros_like(y, dtype=np.float64)
    for wi, bi in zip(w, b):
        out += 0.5 * wi * np.tanh(beta * (y - bi))
    return out


def stanh_gradients(y, layer_or_wb, beta: float, upstream) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic vector-Jacobian products of the soft quantizer.

    Returns gradients with respect to ``y`` (same shape as y), ``w`` and ``b``
    (each of length L - 1), all contracted with ``upstream``.
    """
    if isinstance(layer_or_wb, StanhLayer):
        w, b = layer_or_wb.w, layer_or_wb.b
    else:
        w, b = layer_or_wb
    y = np.asarray(y, dtype=np.float64)
    upstream = np.broadcast_to(np.asarray(upstream, dtype=np.float64), y.shape)
    grad_y = np.zeros_like(y)
    grad_w = np.empty(len(w))
    grad_b = np.empty(len(b))
    for i, (wi, bi) in enumerate(zip(w, b)):
        t = np.tanh(beta * (y - bi))
        sech2 = 1.0 - t * t
        slope = 0.5 * wi * beta * sech2 * upstream
        grad_y += slope
        grad_b[i] = -slope.sum()
        grad_w[i] = 0.5 * np.sum(t * upstream)
    return grad_y, grad_w, grad_b


def soft_quantize(y, layer, beta: float) -> Tensor:
    """Relaxed quantization, differentiable in y and in the layer parameters.

    ``layer`` is either a `StanhLayer` (constant parameters) or a pair of
    tensors ``(w, b)`` produced by `layer_tensors`.
    """
    y = nx.as_tensor(y)
    if isinstance(layer, StanhLayer):
        w_t, b_t = Tensor(layer.w), Tensor(layer.b)
    else:
        w_t, b_t = layer
    out = stanh_forward(y.data, w_t.data, b_t.data, beta)

    def _back(g):
        return stanh_gradients(y.data, (w_t.data, b_t.data), beta, g)

    return nx._node(out, (y, w_t, b_t), _back, "stanh")


def soft_quantize_reference(y, w: Tensor, b: Tensor, beta: float) -> Tensor:
    """The same relaxation assembled from generic autodiff primitives."""
    y = nx.as_tensor(y)
    total = None
    for i in range(w.shape[0]):
        term = nx.scale(w[i], 0.5) * nx.tanh(nx.scale(y - b[i], beta))
        total = term if total is None else total + term
    return total


def layer_tensors(raw_w: Tensor, raw_f: Tensor) -> tuple[Tensor, Tensor]:
    """Differentiable (w, b) from raw parameters."""
    w = nx.exp(raw_w)
    levels = level_tensor(w)
    lower = nx.getitem(levels, slice(0, -1))
    b = lower + w * nx.sigmoid(raw_f)
    return w, b


def level_tensor(w: Tensor) -> Tensor:
    first = nx.scale(nx.sum(w), -0.5)
    return nx.concat([nx.reshape(first, (1,)), first + nx.cumsum(w)])


def bound_tensors(w: Tensor, b: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Levels, left distances and right distances as tensors.

    Unlike `interval_bounds` the outer entries are finite placeholders (zero);
    callers mask the first/last level explicitly.
    """
    levels = level_tensor(w)
    zero = Tensor(np.zeros(1))
    left = nx.concat([zero, nx.getitem(levels, slice(1, None)) - b])
    right = nx.concat([b - nx.getitem(levels, slice(0, -1)), zero])
    return levels, left, right


# ------------------------------------------------------------ serialization


def to_bytes(layer: StanhLayer) -> bytes:
    n = layer.L - 1
    return (
        STANH_MAGIC
        + struct.pack("<BH", STANH_VERSION, layer.L)
        + struct.pack(f"<{n}d", *layer.w)
        + struct.pack(f"<{n}d", *layer.b)
    )


def record_size(L: int) -> int:
    return 4 + 3 + 16 * (L - 1)


def from_bytes(data: bytes, offset: int = 0) -> tuple[StanhLayer, int]:
    """Parse one layer record at `offset`; returns the layer and the next offset."""
    if data[offset : offset + 4] != STANH_MAGIC:
        raise ValueError("not a quantizer record (bad magic)")
    if len(data) < offset + 7:
        raise ValueError("truncated quantizer record")
    version, L = struct.unpack_from("<BH", data, offset + 4)
    if version != STANH_VERSION:
        raise ValueError(f"unsupported quantizer record version {version}")
    if L < 2:
        raise ValueError(f"invalid level count {L}")
    end = offset + record_size(L)
    if len(data) < end:
        raise ValueError("truncated quantizer record")
    n = L - 1
    w = np.array(struct.unpack_from(f"<{n}d", data, offset + 7))
    b = np.array(struct.unpack_from(f"<{n}d", data, offset + 7 + 8 * n))
    layer = StanhLayer(w, b)
    layer.check()
    return layer, end


def save_layer(layer: StanhLayer, path) -> None:
    from .io_utils import atomic_write

    atomic_write(path, to_bytes(layer))


def load_layer(path) -> StanhLayer:
    with open(path, "rb") as fh:
        data = fh.read()
    layer, end = from_bytes(data)
    if end != len(data):
        raise ValueError("trailing bytes after quantizer record")
    return layer
