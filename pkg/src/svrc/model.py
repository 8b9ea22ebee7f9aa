"""Desk-scale mean-scale hyperprior codec with two STanH quantizers."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import entropy
from . import numerics as nx
from . import quantizer as qz
from .numerics import Tensor
from .quantizer import StanhLayer

KERNEL = 5
MAIN_STAGES = 4
HYPER_STAGES = 2
DOWNSAMPLE = 2 ** (MAIN_STAGES + HYPER_STAGES)
LEAKY_SLOPE = 0.01
# Distortion weight convention: lambda multiplies MSE on the 0..255 scale,
# which is MSE on [0, 1] times 255**2.
PIXEL_SCALE2 = 255.0**2


@dataclass
class AnchorModel:
    params: dict[str, np.ndarray]
    factorized: entropy.FactorizedModel
    stanh_main: StanhLayer
    stanh_hyper: StanhLayer
    lam: float
    M: int
    N: int
    anchor_id: str = "A1"
    meta: dict = field(default_factory=dict)

    @property
    def sigma_lower_bound(self) -> float:
        return entropy.SIGMA_LOWER_BOUND

    def weights(self) -> dict[str, np.ndarray]:
        """Every non-quantizer weight, transforms and factorized prior."""
        out = dict(self.params)
        out.update({f"factorized.{k}": v for k, v in self.factorized.params.items()})
        return out

    def weights_digest(self) -> str:
        h = hashlib.sha256()
        for name, value in sorted(self.weights().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return h.hexdigest()

    def with_layers(self, main: StanhLayer, hyper: StanhLayer) -> "AnchorModel":
        """Same weights (shared, not copied) with different quantizers."""
        if main.L != self.stanh_main.L or hyper.L != self.stanh_hyper.L:
            raise ValueError("quantizer level counts do not match the anchor")
        return AnchorModel(self.params, self.factorized, main, hyper, self.lam, self.M, self.N, self.anchor_id, self.meta)


def transform_shapes(M: int, N: int) -> dict[str, tuple[int, ...]]:
    k = KERNEL
    shapes: dict[str, tuple[int, ...]] = {}
    chans = [3] + [M] * MAIN_STAGES
    for i in range(MAIN_STAGES):
        shapes[f"g_a.{i}.weight"] = (chans[i + 1], chans[i], k, k)
        shapes[f"g_a.{i}.bias"] = (chans[i + 1],)
    out_chans = [M] * MAIN_STAGES + [3]
    for i in range(MAIN_STAGES):
        shapes[f"g_s.{i}.weight"] = (out_chans[i], out_chans[i + 1], k, k)
        shapes[f"g_s.{i}.bias"] = (out_chans[i + 1],)
    shapes["h_a.0.weight"] = (N, M, k, k)
    shapes["h_a.0.bias"] = (N,)
    shapes["h_a.1.weight"] = (N, N, k, k)
    shapes["h_a.1.bias"] = (N,)
    shapes["h_s.0.weight"] = (N, N, k, k)
    shapes["h_s.0.bias"] = (N,)
    shapes["h_s.1.weight"] = (N, 2 * M, k, k)
    shapes["h_s.1.bias"] = (2 * M,)
    return shapes


def parameter_count(M: int, N: int, filters: tuple[int, ...] = (3, 3)) -> int:
    """Number of stored doubles in an anchor, excluding the quantizers."""
    transforms = sum(math.prod(s) for s in transform_shapes(M, N).values())
    widths = (1, *filters, 1)
    per_channel = sum(widths[i] * widths[i + 1] + widths[i + 1] for i in range(len(widths) - 1))
    per_channel += sum(filters)
    return transforms + N * per_channel


def init_params(M: int, N: int, rng: np.random.Generator, latent_gain: float = 4.0) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    for name, shape in transform_shapes(M, N).items():
        if name.endswith("bias"):
            params[name] = np.zeros(shape)
            continue
        transposed = name.startswith(("g_s", "h_s"))
        fan_in = shape[0] * KERNEL * KERNEL / 4 if transposed else shape[1] * KERNEL * KERNEL
        params[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    # put the initial latent on the scale of the quantizer steps
    params[f"g_a.{MAIN_STAGES - 1}.weight"] *= latent_gain
    params[f"g_s.0.weight"] /= latent_gain
    return params


def new_anchor(
    M: int = 32,
    N: int = 16,
    levels_main: int = 60,
    levels_hyper: int = 60,
    init_range: float = 30.0,
    lam: float = 0.01,
    seed: int = 0,
    anchor_id: str = "A1",
) -> AnchorModel:
    rng = np.random.default_rng(seed)
    params = init_params(M, N, rng)
    fact = entropy.FactorizedModel(N, seed=int(rng.integers(2**31)))
    return AnchorModel(
        params,
        fact,
        qz.init_uniform(levels_main, -init_range, init_range),
        qz.init_uniform(levels_hyper, -init_range, init_range),
        lam,
        M,
        N,
        anchor_id,
        {"seed": seed},
    )


# ---------------------------------------------------------------- transforms


def _p(params, name):
    return params[name]


def analysis(params, x: Tensor) -> Tensor:
    h = x
    for i in range(MAIN_STAGES):
        h = nx.conv2d(h, _p(params, f"g_a.{i}.weight"), _p(params, f"g_a.{i}.bias"), stride=2, padding=2)
        if i < MAIN_STAGES - 1:
            h = nx.leaky_relu(h, LEAKY_SLOPE)
    return h


def synthesis(params, y: Tensor) -> Tensor:
    h = y
    for i in range(MAIN_STAGES):
        h = nx.conv_transpose2d(
            h, _p(params, f"g_s.{i}.weight"), _p(params, f"g_s.{i}.bias"), stride=2, padding=2, output_padding=1
        )
        if i < MAIN_STAGES - 1:
            h = nx.leaky_relu(h, LEAKY_SLOPE)
    return h


def hyper_analysis(params, y: Tensor) -> Tensor:
    h = nx.conv2d(y, _p(params, "h_a.0.weight"), _p(params, "h_a.0.bias"), stride=2, padding=2)
    h = nx.leaky_relu(h, LEAKY_SLOPE)
    return nx.conv2d(h, _p(params, "h_a.1.weight"), _p(params, "h_a.1.bias"), stride=2, padding=2)


def hyper_synthesis(params, z: Tensor, M: int) -> tuple[Tensor, Tensor]:
    """Gaussian mean and scale (scale floored at the lower bound)."""
    h = nx.conv_transpose2d(z, _p(params, "h_s.0.weight"), _p(params, "h_s.0.bias"), 2, 2, 1)
    h = nx.leaky_relu(h, LEAKY_SLOPE)
    h = nx.conv_transpose2d(h, _p(params, "h_s.1.weight"), _p(params, "h_s.1.bias"), 2, 2, 1)
    mu = nx.getitem(h, (slice(None), slice(0, M)))
    sigma = nx.lower_bound(nx.softplus(nx.getitem(h, (slice(None), slice(M, 2 * M)))), entropy.SIGMA_LOWER_BOUND)
    return mu, sigma


# ------------------------------------------------------------ training path


@dataclass
class ForwardResult:
    x_hat: Tensor
    y: Tensor
    y_soft: Tensor
    y_hard: np.ndarray
    y_idx: np.ndarray
    z: Tensor
    z_soft: Tensor
    z_hard: np.ndarray
    z_idx: np.ndarray
    mu: Tensor
    sigma: Tensor
    rate_z: Tensor
    rate_y: Tensor


def constant_params(model: AnchorModel) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
    return (
        {k: Tensor(v) for k, v in model.params.items()},
        {k: Tensor(v) for k, v in model.factorized.params.items()},
    )


def check_shape(x_shape) -> None:
    if len(x_shape) != 4 or x_shape[1] != 3:
        raise ValueError(f"expected a (B, 3, H, W) image batch, got {tuple(x_shape)}")
    if x_shape[2] % DOWNSAMPLE or x_shape[3] % DOWNSAMPLE:
        raise ValueError(f"image sides must be multiples of {DOWNSAMPLE}, got {x_shape[2]}x{x_shape[3]}")


def forward_train(
    x,
    model: AnchorModel,
    beta_m: float,
    beta_h: float,
    params: dict[str, Tensor] | None = None,
    fact_params: dict[str, Tensor] | None = None,
    layers: tuple | None = None,
) -> ForwardResult:
    """Relaxed forward pass.

    ``params``/``fact_params`` are tensor views of the weights and ``layers``
    is ``((w_m, b_m), (w_h, b_h))`` as tensors; any of them defaults to
    constants taken from `model`.
    """
    x = nx.as_tensor(x)
    if x.data.ndim == 3:
        x = nx.reshape(x, (1, *x.shape))
    check_shape(x.shape)
    if params is None or fact_params is None:
        p_const, f_const = constant_params(model)
        params = params if params is not None else p_const
        fact_params = fact_params if fact_params is not None else f_const
    if layers is None:
        layers = (
            (Tensor(model.stanh_main.w), Tensor(model.stanh_main.b)),
            (Tensor(model.stanh_hyper.w), Tensor(model.stanh_hyper.b)),
        )
    (w_m, b_m), (w_h, b_h) = layers

    y = analysis(params, x)
    z = hyper_analysis(params, y)
    z_soft = qz.soft_quantize(z, (w_h, b_h), beta_h)
    z_idx = np.searchsorted(b_h.data, z.data, side="right")
    z_hard = qz._levels_from_w(w_h.data)[z_idx]
    mu, sigma = hyper_synthesis(params, z_soft, model.M)
    y_soft = qz.soft_quantize(y, (w_m, b_m), beta_m)
    y_idx = np.searchsorted(b_m.data, y.data, side="right")
    y_hard = qz._levels_from_w(w_m.data)[y_idx]
    x_hat = synthesis(params, y_soft)

    _, left_h, right_h = qz.bound_tensors(w_h, b_h)
    rate_z = entropy.factorized_rate(z_soft, model.factorized, indices=z_idx, bounds=(left_h, right_h), params=fact_params)
    _, left_m, right_m = qz.bound_tensors(w_m, b_m)
    rate_y = entropy.gaussian_rate(y_soft, mu, sigma, y_idx, left_m, right_m)
    return ForwardResult(x_hat, y, y_soft, y_hard, y_idx, z, z_soft, z_hard, z_idx, mu, sigma, rate_z, rate_y)


def rd_loss(x, x_hat, rate_z, rate_y, lam: float) -> Tensor:
    """lam * MSE(x, x_hat) + (rate_z + rate_y) / pixels.

    Pixels are counted over the batch and spatial extent (channels excluded).
    """
    x, x_hat = nx.as_tensor(x), nx.as_tensor(x_hat)
    rate_z, rate_y = nx.as_tensor(rate_z), nx.as_tensor(rate_y)
    if rate_z.data < 0 or rate_y.data < 0:
        raise ValueError("rates must be non-negative")
    shape = x.shape
    pixels = shape[-1] * shape[-2] * (shape[0] if len(shape) == 4 else 1)
    mse = nx.mean(nx.square(x - x_hat))
    return nx.scale(mse, lam) + nx.scale(rate_z + rate_y, 1.0 / pixels)


# ----------------------------------------------------------- inference path


@dataclass
class HardResult:
    x_hat: np.ndarray
    y_idx: np.ndarray
    z_idx: np.ndarray
    y_hat: np.ndarray
    z_hat: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray


def hyper_decode(model: AnchorModel, z_idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ẑ, mu, sigma from hyper level indices; shared by encoder and decoder."""
    z_hat = model.stanh_hyper.levels[z_idx]
    with nx.no_grad():
        params, _ = constant_params(model)
        mu, sigma = hyper_synthesis(params, Tensor(z_hat), model.M)
    return z_hat, mu.data, sigma.data


def synthesize(model: AnchorModel, y_idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    y_hat = model.stanh_main.levels[y_idx]
    with nx.no_grad():
        params, _ = constant_params(model)
        x_hat = synthesis(params, Tensor(y_hat)).data
    return y_hat, x_hat


def forward_hard(x, model: AnchorModel) -> HardResult:
    """Inference pass with exact ladder quantization (no entropy coding)."""
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    check_shape(x.shape)
    with nx.no_grad():
        params, _ = constant_params(model)
        y = analysis(params, Tensor(x)).data
        z = hyper_analysis(params, Tensor(y)).data
    z_idx = qz.quantize_indices(z, model.stanh_hyper)
    z_hat, mu, sigma = hyper_decode(model, z_idx)
    y_idx = qz.quantize_indices(y, model.stanh_main)
    y_hat, x_hat = synthesize(model, y_idx)
    return HardResult(x_hat, y_idx, z_idx, y_hat, z_hat, mu, sigma)


def estimate_bits(model: AnchorModel, hard: HardResult) -> tuple[float, float]:
    """Model rate (hyper bits, main bits) of the hard-quantized latents."""
    grid_h = qz.interval_bounds(model.stanh_hyper)
    grid_m = qz.interval_bounds(model.stanh_main)
    with nx.no_grad():
        bits_z = entropy.factorized_rate(hard.z_hat, model.factorized, grid_h, indices=hard.z_idx).item()
        bits_y = entropy.gaussian_rate(
            hard.y_hat, hard.mu, hard.sigma, hard.y_idx, grid_m.left_bounds, grid_m.right_bounds
        ).item()
    return bits_z, bits_y
