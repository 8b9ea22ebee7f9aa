"""Rate models and integer coding tables.

Training rates integrate a density over the quantization interval that
contains each latent element; interval edges come from the quantizer, so the
rate is differentiable with respect to the quantizer parameters as well as
the latents. Coding uses integer-normalized PMFs over level indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .quantizer import QuantizerGrid

P_MIN = 2.0**-16
DEFAULT_PRECISION = 16
SIGMA_LOWER_BOUND = 0.11
_LN2 = math.log(2.0)


def default_scale_table(count: int = 64, lo: float = SIGMA_LOWER_BOUND, hi: float = 64.0) -> np.ndarray:
    return np.geomspace(lo, hi, count)


# ------------------------------------------------------------ interval edges


@dataclass
class IntervalEdges:
    """Per-element interval edges around a (soft) latent value.

    ``lower``/``upper`` are tensors; where ``lower_open``/``upper_open`` is
    set, the edge is at minus/plus infinity and the tensor value is unused.
    """

    lower: Tensor
    upper: Tensor
    lower_open: np.ndarray
    upper_open: np.ndarray


def interval_edges(values, indices, left, right) -> IntervalEdges:
    """Edges ``value - r-`` and ``value + r+`` for each element's level index.

    ``left``/``right`` are per-level distances, either a `QuantizerGrid`'s
    arrays (infinite at the tails) or tensors from
    `quantizer.bound_tensors` (finite placeholders at the tails).
    """
    values = nx.as_tensor(values)
    indices = np.asarray(indices)
    L = left.shape[0] if isinstance(left, Tensor) else len(left)
    lower_open = indices == 0
    upper_open = indices == L - 1
    if not isinstance(left, Tensor):
        left_arr = np.asarray(left, dtype=np.float64)
        right_arr = np.asarray(right, dtype=np.float64)
        lower_open = lower_open | np.isinf(left_arr[indices])
        upper_open = upper_open | np.isinf(right_arr[indices])
        left = Tensor(np.where(np.isinf(left_arr), 0.0, left_arr))
        right = Tensor(np.where(np.isinf(right_arr), 0.0, right_arr))
    lower = values - nx.take(left, indices)
    upper = values + nx.take(right, indices)
    return IntervalEdges(lower, upper, lower_open, upper_open)


def grid_indices(values, grid: QuantizerGrid) -> np.ndarray:
    """Level index of each value under `grid` (upper level on a tie)."""
    values = np.asarray(getattr(values, "data", values), dtype=np.float64)
    return np.searchsorted(grid.edges[1:-1], values, side="right")


def _bits(prob: Tensor, p_min: float) -> Tensor:
    prob = nx.lower_bound(prob, p_min)
    return nx.scale(nx.sum(nx.log(prob)), -1.0 / _LN2)


# ------------------------------------------------------------------ Gaussian


def gaussian_interval_rate(y_val, mu, sigma, r_minus, r_plus, p_min: float = P_MIN):
    """Probability mass of N(mu, sigma) on [y_val - r_minus, y_val + r_plus].

    Works elementwise on arrays; infinite distances integrate to the tails.
    The result is clamped below at `p_min`.
    """
    y_val, mu, sigma, r_minus, r_plus = np.broadcast_arrays(
        *(np.asarray(a, dtype=np.float64) for a in (y_val, mu, sigma, r_minus, r_plus))
    )
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    with np.errstate(invalid="ignore"):
        upper = np.where(np.isinf(r_plus), 1.0, nx.normal_cdf_array((y_val + r_plus - mu) / sigma))
        lower = np.where(np.isinf(r_minus), 0.0, nx.normal_cdf_array((y_val - r_minus - mu) / sigma))
    prob = np.maximum(upper - lower, p_min)
    return prob if prob.ndim else float(prob)


def gaussian_likelihood(edges: IntervalEdges, mu: Tensor, sigma: Tensor) -> Tensor:
    """Differentiable interval probability under per-element Gaussians."""
    upper = nx.normal_cdf(nx.div(edges.upper - mu, sigma))
    lower = nx.normal_cdf(nx.div(edges.lower - mu, sigma))
    upper = nx.where(edges.upper_open, Tensor(1.0), upper)
    lower = nx.where(edges.lower_open, Tensor(0.0), lower)
    return upper - lower


def gaussian_rate(values, mu, sigma, indices, left, right, p_min: float = P_MIN) -> Tensor:
    """Bits for `values` under N(mu, sigma) integrated over their intervals."""
    edges = interval_edges(values, indices, left, right)
    return _bits(gaussian_likelihood(edges, nx.as_tensor(mu), nx.as_tensor(sigma)), p_min)


def gaussian_pmf(mu, sigma, grid: QuantizerGrid) -> np.ndarray:
    """Per-element PMF over the grid levels, shape (n, L); rows sum to 1."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1, 1)
    cdf = nx.normal_cdf_array((grid.edges[None, :] - mu) / sigma)
    return np.diff(cdf, axis=1)


# ---------------------------------------------------------------- factorized


class FactorizedModel:
    """Per-channel learned monotone CDF.

    Each channel maps x through stages ``h <- softplus(H) h + b`` with a
    ``tanh(a) * tanh(h)`` residual after every stage but the last, then a
    logistic. Parameters live in ``params`` as numpy arrays so the model can
    be trained by any routine that swaps in tensors.
    """

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3), seed: int = 0, params=None):
        self.channels = channels
        self.filters = tuple(filters)
        self.widths = (1, *self.filters, 1)
        self.params = params if params is not None else self._init_params(np.random.default_rng(seed))

    @property
    def num_stages(self) -> int:
        return len(self.widths) - 1

    def _init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        # Identity composite at init (c(x) = logistic(x)); random hidden biases
        # break the symmetry between units.
        C = self.channels
        params: dict[str, np.ndarray] = {}
        mats = []
        for k in range(self.num_stages):
            n_in, n_out = self.widths[k], self.widths[k + 1]
            value = 1.0 / n_out if k < self.num_stages - 1 else 1.0
            mats.append(np.full((C, n_out, n_in), value))
            params[f"matrix{k}"] = np.full((C, n_out, n_in), math.log(math.expm1(value)))
        offset = np.zeros((C, 1, 1))
        for k in range(self.num_stages):
            n_out = self.widths[k + 1]
            if k < self.num_stages - 1:
                bias = rng.uniform(-0.5, 0.5, size=(C, n_out, 1))
                params[f"factor{k}"] = np.zeros((C, n_out, 1))
            else:
                bias = np.zeros((C, n_out, 1))
            offset = np.matmul(mats[k], offset) + bias
            params[f"bias{k}"] = bias
        params[f"bias{self.num_stages - 1}"] = params[f"bias{self.num_stages - 1}"] - offset
        return params

    def parameter_names(self) -> list[str]:
        return list(self.params)

    def logits(self, x: Tensor, params=None) -> Tensor:
        """Pre-logistic values for x shaped (channels, n)."""
        p = params if params is not None else {k: Tensor(v) for k, v in self.params.items()}
        h = nx.reshape(nx.as_tensor(x), (self.channels, 1, -1))
        for k in range(self.num_stages):
            h = nx.matmul(nx.softplus(p[f"matrix{k}"]), h) + p[f"bias{k}"]
            if k < self.num_stages - 1:
                h = h + nx.tanh(p[f"factor{k}"]) * nx.tanh(h)
        return nx.reshape(h, (self.channels, -1))

    def cdf(self, x: np.ndarray) -> np.ndarray:
        """Numeric CDF for x shaped (channels, n)."""
        with nx.no_grad():
            return nx.sigmoid(self.logits(Tensor(x))).data

    def likelihood(self, edges: IntervalEdges, params=None) -> Tensor:
        """Interval probabilities; edge tensors shaped (channels, n)."""
        n = edges.upper.shape[1]
        both = nx.concat([edges.upper, edges.lower], axis=1)
        c = nx.sigmoid(self.logits(both, params))
        upper = nx.where(edges.upper_open, Tensor(1.0), nx.getitem(c, (slice(None), slice(0, n))))
        lower = nx.where(edges.lower_open, Tensor(0.0), nx.getitem(c, (slice(None), slice(n, None))))
        return upper - lower

    def pmf(self, grid: QuantizerGrid) -> np.ndarray:
        """Per-channel PMF over grid levels, shape (channels, L)."""
        inner = grid.edges[1:-1]
        c = self.cdf(np.broadcast_to(inner, (self.channels, inner.size)).copy())
        full = np.concatenate([np.zeros((self.channels, 1)), c, np.ones((self.channels, 1))], axis=1)
        return np.diff(full, axis=1)


def channels_first(t: Tensor) -> Tensor:
    """(B, C, H, W) -> (C, B*H*W)."""
    t = nx.as_tensor(t)
    return nx.reshape(nx.transpose(t, (1, 0, 2, 3)), (t.shape[1], -1))


def factorized_rate(
    z_soft,
    model: FactorizedModel,
    grid: QuantizerGrid | None = None,
    indices=None,
    bounds=None,
    params=None,
    p_min: float = P_MIN,
) -> Tensor:
    """Bits for a (B, C, H, W) hyper latent under the factorized model.

    Interval distances come from `grid`, or from ``bounds = (left, right)``
    tensors when gradients must reach the quantizer.
    """
    z_soft = nx.as_tensor(z_soft)
    if z_soft.shape[1] != model.channels:
        raise ValueError(f"model has {model.channels} channels, latent has {z_soft.shape[1]}")
    if bounds is None:
        if grid is None:
            raise ValueError("need a grid or bound tensors")
        left, right = grid.left_bounds, grid.right_bounds
    else:
        left, right = bounds
    if indices is None:
        indices = grid_indices(z_soft, grid)
    flat_idx = np.asarray(indices).transpose(1, 0, 2, 3).reshape(model.channels, -1)
    edges = interval_edges(channels_first(z_soft), flat_idx, left, right)
    return _bits(model.likelihood(edges, params), p_min)


# -------------------------------------------------------------- coding tables


@dataclass(frozen=True)
class CodingTable:
    precision: int
    counts: np.ndarray

    @property
    def cumulative(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.counts)]).astype(np.int64)

    @property
    def L(self) -> int:
        return self.counts.size

    def code_length(self, symbol: int) -> float:
        return self.precision - math.log2(int(self.counts[symbol]))


def quantize_pmfs(probs, precision: int = DEFAULT_PRECISION) -> np.ndarray:
    """Integer counts per row summing to 2**precision, every count >= 1.

    Counts start at floor(p * total) (at least 1); any shortfall goes to the
    entries with the largest remainders, any excess is taken one at a time
    from the currently largest count. Ties resolve to the lowest index.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if not 8 <= precision <= 16:
        raise ValueError(f"precision must be in [8, 16], got {precision}")
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise ValueError("probabilities must be finite and non-negative")
    n, L = probs.shape
    total = 1 << precision
    if L > total:
        raise ValueError(f"{L} levels do not fit in {precision}-bit tables")
    mass = probs.sum(axis=1, keepdims=True)
    if np.any(mass <= 0):
        raise ValueError("all-zero probability vector")
    raw = probs / mass * total
    counts = np.maximum(np.floor(raw).astype(np.int64), 1)
    remainder = raw - np.floor(raw)
    deficit = total - counts.sum(axis=1)

    short = deficit > 0
    if np.any(short):
        order = np.argsort(-remainder[short], axis=1, kind="stable")
        ranks = np.empty_like(order)
        rows = np.arange(order.shape[0])[:, None]
        ranks[rows, order] = np.arange(L)[None, :]
        counts[short] += ranks < deficit[short][:, None]

    excess = -np.minimum(deficit, 0)
    while np.any(excess > 0):
        rows = np.nonzero(excess > 0)[0]
        cols = np.argmax(counts[rows], axis=1)
        counts[rows, cols] -= 1
        excess[rows] -= 1
    return counts


def build_coding_table(probabilities, precision: int = DEFAULT_PRECISION) -> CodingTable:
    return CodingTable(precision, quantize_pmfs(probabilities, precision)[0])


def snap_scales(sigma, scale_table) -> np.ndarray:
    """Index of the nearest scale-table entry for every sigma."""
    table = np.asarray(scale_table, dtype=np.float64)
    if table.size == 0:
        raise ValueError("empty scale table")
    if np.any(np.diff(table) <= 0) or table[0] <= 0:
        raise ValueError("scale table must be positive and strictly increasing")
    sigma = np.asarray(sigma, dtype=np.float64)
    hi = np.clip(np.searchsorted(table, sigma), 1, max(table.size - 1, 1))
    if table.size == 1:
        return np.zeros(sigma.shape, dtype=np.intp)
    lo = hi - 1
    pick_hi = np.abs(table[hi] - sigma) < np.abs(sigma - table[lo])
    return np.where(pick_hi, hi, lo)


def conditional_tables(mu, sigma, grid: QuantizerGrid, scale_table, precision: int = DEFAULT_PRECISION) -> np.ndarray:
    """Integer count rows (n, L) for every latent element.

    sigma is snapped to the scale table; mu is used as is.
    """
    table = np.asarray(scale_table, dtype=np.float64)
    snapped = table[snap_scales(sigma, table)].reshape(-1)
    pmf = gaussian_pmf(np.asarray(mu).reshape(-1), snapped, grid)
    return quantize_pmfs(pmf, precision)


def factorized_tables(model: FactorizedModel, grid: QuantizerGrid, precision: int = DEFAULT_PRECISION) -> np.ndarray:
    """Integer count rows (channels, L)."""
    return quantize_pmfs(model.pmf(grid), precision)


def table_code_length(symbols, counts: np.ndarray, precision: int) -> float:
    """Ideal bits, sum of -log2(count / 2**P), for symbols under count rows."""
    symbols = np.asarray(symbols).reshape(-1)
    counts = np.asarray(counts).reshape(-1, counts.shape[-1])
    picked = counts[np.arange(symbols.size), symbols]
    return float(np.sum(precision - np.log2(picked)))
