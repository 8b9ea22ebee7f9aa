"""Anchor training and quantizer-only derivation refinement."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import annealing
from . import numerics as nx
from . import quantizer as qz
from .model import PIXEL_SCALE2, AnchorModel, forward_train, new_anchor, rd_loss
from .numerics import Tensor
from .quantizer import StanhLayer

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.01
    seed: int = 0
    steps: int = 2000
    M: int = 32
    N: int = 16
    levels_main: int = 60
    levels_hyper: int = 60
    init_range: float = 30.0
    K: float = annealing.DEFAULT_K
    batch: int = 8
    patch: int = 64
    learning_rate: float = 1e-4
    quantizer_learning_rate: float | None = None
    patience: int = 50
    epoch_steps: int = 20
    gap_reduction: str = "mean"
    anchor_id: str = "A1"
    log_every: int = 0

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be positive")
        if self.patch % 64:
            raise ValueError("patch size must be a multiple of 64")
        if self.levels_main < 2 or self.levels_hyper < 2:
            raise ValueError("quantizers need at least 2 levels")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


# ------------------------------------------------------------------ dataset


class PatchDataset:
    """Random square crops from a list of (3, H, W) images in [0, 1]."""

    def __init__(self, images):
        self.images = [np.asarray(im, dtype=np.float64) for im in images]
        if not self.images:
            raise ValueError("empty image set")

    @classmethod
    def from_directory(cls, path) -> "PatchDataset":
        from .ppm import load_ppm

        files = sorted(Path(path).glob("*.ppm"))
        if not files:
            raise FileNotFoundError(f"no .ppm images in {path}")
        return cls([load_ppm(f).to_float() for f in files])

    def sample(self, batch: int, patch: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty((batch, 3, patch, patch))
        for i in range(batch):
            im = self.images[rng.integers(len(self.images))]
            _, h, w = im.shape
            if h < patch or w < patch:
                raise ValueError(f"image {h}x{w} smaller than patch {patch}")
            top = rng.integers(h - patch + 1)
            left = rng.integers(w - patch + 1)
            out[i] = im[:, top : top + patch, left : left + patch]
        return out


# --------------------------------------------------------------------- Adam


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr_scale: dict[str, float] | None = None) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            lr = self.lr * (lr_scale.get(k, 1.0) if lr_scale else 1.0)
            self.params[k] = self.params[k] - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# ----------------------------------------------------------------- helpers


@dataclass
class StepLog:
    step: int
    loss: float
    mse: float
    bpp: float
    beta_main: float
    beta_hyper: float


@dataclass
class History:
    records: list[StepLog] = field(default_factory=list)

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])


def _raw_quantizer_params(layer: StanhLayer, prefix: str) -> dict[str, np.ndarray]:
    raw_w, raw_f = layer.to_raw()
    return {f"{prefix}.raw_w": raw_w, f"{prefix}.raw_f": raw_f}


def _layer_from_state(state: dict[str, np.ndarray], prefix: str) -> StanhLayer:
    return StanhLayer.from_raw(state[f"{prefix}.raw_w"], state[f"{prefix}.raw_f"])


class _Schedule:
    """Epoch-level plateau handling: halve the learning rate on every plateau,
    double K the first time the loss plateaus."""

    def __init__(self, config: TrainConfig, anneal: list[annealing.AnnealingState]):
        self.epoch_steps = config.epoch_steps
        self.lr_plateau = annealing.PlateauDetector(config.patience)
        self.k_plateau = annealing.PlateauDetector(config.patience)
        self.k_doubled = False
        self.anneal = anneal
        self.acc = []
        self.lr_factor = 1.0

    def update(self, loss: float) -> None:
        self.acc.append(loss)
        if len(self.acc) < self.epoch_steps:
            return
        epoch_loss = float(np.mean(self.acc))
        self.acc = []
        if self.lr_plateau.update(epoch_loss):
            self.lr_factor *= 0.5
            logger.info("loss plateau: learning rate factor now %g", self.lr_factor)
        if not self.k_doubled and self.k_plateau.update(epoch_loss):
            self.k_doubled = True
            for st in self.anneal:
                st.K *= 2.0
            logger.info("loss plateau: annealing velocity doubled")


def _diagnose(step: int, loss, result) -> str:
    def norm(t):
        d = getattr(t, "data", t)
        return float(np.sqrt(np.nansum(np.asarray(d, dtype=np.float64) ** 2)))

    return (
        f"non-finite loss at step {step}: loss={float(loss.data)!r} "
        f"|y|={norm(result.y):.4g} |z|={norm(result.z):.4g} |x_hat|={norm(result.x_hat):.4g} "
        f"rate_y={float(result.rate_y.data):.4g} rate_z={float(result.rate_z.data):.4g}"
    )


def _run(
    model: AnchorModel,
    dataset: PatchDataset,
    config: TrainConfig,
    lam: float,
    train_weights: bool,
    anneal: list[annealing.AnnealingState],
    rng: np.random.Generator,
) -> tuple[dict[str, np.ndarray], History]:
    state: dict[str, np.ndarray] = {}
    if train_weights:
        state.update({f"p.{k}": v.copy() for k, v in model.params.items()})
        state.update({f"f.{k}": v.copy() for k, v in model.factorized.params.items()})
    state.update(_raw_quantizer_params(model.stanh_main, "main"))
    state.update(_raw_quantizer_params(model.stanh_hyper, "hyper"))
    lr_scale = None
    if config.quantizer_learning_rate is not None:
        ratio = config.quantizer_learning_rate / config.learning_rate
        lr_scale = {k: ratio for k in state if k.startswith(("main.", "hyper."))}
    opt = Adam(state, config.learning_rate)
    sched = _Schedule(config, anneal)
    history = History()
    const = None if train_weights else {k: Tensor(v) for k, v in model.params.items()}
    const_f = None if train_weights else {k: Tensor(v) for k, v in model.factorized.params.items()}
    gaps = [0.0, 0.0]
    start = time.perf_counter()

    for step in range(1, config.steps + 1):
        beta_m = anneal[0].step(gaps[0])
        beta_h = anneal[1].step(gaps[1])
        x = dataset.sample(config.batch, config.patch, rng)
        tensors = {k: Tensor(v, requires_grad=True) for k, v in state.items()}
        if train_weights:
            params = {k[2:]: t for k, t in tensors.items() if k.startswith("p.")}
            fparams = {k[2:]: t for k, t in tensors.items() if k.startswith("f.")}
        else:
            params, fparams = const, const_f
        layers = (
            qz.layer_tensors(tensors["main.raw_w"], tensors["main.raw_f"]),
            qz.layer_tensors(tensors["hyper.raw_w"], tensors["hyper.raw_f"]),
        )
        res = forward_train(x, model, beta_m, beta_h, params, fparams, layers)
        loss = rd_loss(x, res.x_hat, res.rate_z, res.rate_y, lam * PIXEL_SCALE2)
        if not np.isfinite(loss.data):
            raise TrainingError(_diagnose(step, loss, res))
        nx.backward(loss)

        opt.lr = config.learning_rate * sched.lr_factor
        opt.step({k: t.grad for k, t in tensors.items()}, lr_scale)

        gaps = [
            annealing.quantization_gap(res.y.data, res.y_soft.data, res.y_hard, config.gap_reduction),
            annealing.quantization_gap(res.z.data, res.z_soft.data, res.z_hard, config.gap_reduction),
        ]
        pixels = x.shape[0] * x.shape[2] * x.shape[3]
        mse = float(np.mean((x - res.x_hat.data) ** 2))
        bpp = float(res.rate_y.data + res.rate_z.data) / pixels
        history.records.append(StepLog(step, float(loss.data), mse, bpp, beta_m, beta_h))
        sched.update(float(loss.data))
        if config.log_every and step % config.log_every == 0:
            logger.info(
                "step %d loss %.4f mse %.5f bpp %.4f beta %.1f/%.1f (%.1fs)",
                step, float(loss.data), mse, bpp, anneal[0].beta_max, anneal[1].beta_max,
                time.perf_counter() - start,
            )
    return state, history


# ------------------------------------------------------------------ anchors


def train_anchor(dataset: PatchDataset, config: TrainConfig, return_history: bool = False):
    """Train every weight of a fresh codec against the RD objective."""
    model = new_anchor(
        config.M, config.N, config.levels_main, config.levels_hyper, config.init_range, config.lam,
        config.seed, config.anchor_id,
    )
    rng = np.random.default_rng([config.seed, 1])
    anneal = [
        annealing.AnnealingState(K=config.K, seed=int(rng.integers(2**31))),
        annealing.AnnealingState(K=config.K, seed=int(rng.integers(2**31))),
    ]
    state, history = _run(model, dataset, config, config.lam, True, anneal, rng)
    params = {k[2:]: v for k, v in state.items() if k.startswith("p.")}
    fparams = {k[2:]: v for k, v in state.items() if k.startswith("f.")}
    model.params = params
    model.factorized.params = fparams
    model.stanh_main = _layer_from_state(state, "main")
    model.stanh_hyper = _layer_from_state(state, "hyper")
    model.meta = {
        "seed": config.seed,
        "steps": config.steps,
        "K": anneal[0].K,
        "beta_max_main": anneal[0].beta_max,
        "beta_max_hyper": anneal[1].beta_max,
    }
    return (model, history) if return_history else model


# -------------------------------------------------------------- derivations


@dataclass
class Derivation:
    anchor_id: str
    derivation_id: str
    lam: float
    stanh_main: StanhLayer
    stanh_hyper: StanhLayer
    meta: dict = field(default_factory=dict)

    @property
    def num_parameters(self) -> int:
        return self.stanh_main.num_parameters + self.stanh_hyper.num_parameters

    def apply(self, anchor: AnchorModel) -> AnchorModel:
        if anchor.anchor_id != self.anchor_id:
            raise ValueError(f"derivation {self.derivation_id} belongs to {self.anchor_id}, not {anchor.anchor_id}")
        return anchor.with_layers(self.stanh_main, self.stanh_hyper)


def refine_derivation(
    anchor: AnchorModel,
    lam_new: float,
    dataset: PatchDataset,
    config: TrainConfig,
    derivation_id: str = "D1",
    start: tuple[StanhLayer, StanhLayer] | None = None,
    return_history: bool = False,
):
    """Train only the two quantizers of `anchor` for a new lambda.

    The anchor's weights are read, never written. Annealing resumes from the
    anchor's final ceilings. `start` optionally seeds the quantizers from
    another derivation instead of the anchor's own layers.
    """
    if lam_new <= 0:
        raise ValueError("lambda must be positive")
    main, hyper = start if start is not None else (anchor.stanh_main, anchor.stanh_hyper)
    work = anchor.with_layers(main, hyper)
    rng = np.random.default_rng([config.seed, 2])
    K = anchor.meta.get("K", config.K)
    anneal = [
        annealing.AnnealingState.resume(anchor.meta.get("beta_max_main", 1.0), K, int(rng.integers(2**31))),
        annealing.AnnealingState.resume(anchor.meta.get("beta_max_hyper", 1.0), K, int(rng.integers(2**31))),
    ]
    state, history = _run(work, dataset, config, lam_new, False, anneal, rng)
    deriv = Derivation(
        anchor.anchor_id,
        derivation_id,
        lam_new,
        _layer_from_state(state, "main"),
        _layer_from_state(state, "hyper"),
        {"steps": config.steps, "beta_max_main": anneal[0].beta_max, "beta_max_hyper": anneal[1].beta_max},
    )
    return (deriv, history) if return_history else deriv


def interpolate_derivations(d1: Derivation, d2: Derivation, rho: float, derivation_id: str) -> Derivation:
    if d1.anchor_id != d2.anchor_id:
        raise ValueError("interpolation endpoints must share an anchor")
    return Derivation(
        d1.anchor_id,
        derivation_id,
        (1.0 - rho) * d1.lam + rho * d2.lam,
        qz.interpolate(d1.stanh_main, d2.stanh_main, rho),
        qz.interpolate(d1.stanh_hyper, d2.stanh_hyper, rho),
        {"interpolated": (d1.derivation_id, d2.derivation_id, rho)},
    )


def config_for(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes)
