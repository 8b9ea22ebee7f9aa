"""Rate-distortion evaluation: PSNR, bpp, Bjontegaard deltas, sweeps and
quantization-interval reports, plus their CSV outputs."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.integrate import trapezoid
from scipy.interpolate import PchipInterpolator

from . import codec
from . import entropy
from . import model as mdl
from . import numerics as nx
from . import quantizer as qz
from .io_utils import atomic_write
from .model import AnchorModel
from .numerics import Tensor
from .ppm import PpmImage
from .train import Derivation

PSNR_LOSSLESS = 100.0
BD_SAMPLES = 1000


@dataclass(frozen=True)
class RdPoint:
    bpp: float
    psnr: float
    label: str

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")
        if not math.isfinite(self.psnr):
            raise ValueError(f"psnr must be finite, got {self.psnr}")


def psnr(x, x_hat) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; 100 dB when they are equal."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    mse = float(np.mean((x - x_hat) ** 2))
    if mse == 0.0:
        return PSNR_LOSSLESS
    return 10.0 * math.log10(1.0 / mse)


def bpp(stream, width: int, height: int) -> float:
    """8 * total bytes / pixels, header included.

    `stream` may be a `Bitstream`, raw bytes, or a byte count.
    """
    if width * height <= 0:
        raise ValueError("image must have positive area")
    n = stream if isinstance(stream, (int, np.integer)) else len(stream)
    return 8.0 * n / (width * height)


# --------------------------------------------------------- Bjontegaard


def _curve(points: Sequence[RdPoint]) -> tuple[np.ndarray, np.ndarray]:
    if len(points) < 4:
        raise ValueError(f"a Bjontegaard curve needs at least 4 points, got {len(points)}")
    rate = np.log10([p.bpp for p in points])
    quality = np.array([p.psnr for p in points], dtype=np.float64)
    order = np.argsort(rate, kind="stable")
    rate, quality = rate[order], quality[order]
    if np.any(np.diff(rate) <= 0) or np.any(np.diff(quality) <= 0):
        raise ValueError("Bjontegaard curves must be strictly increasing in both rate and PSNR")
    return rate, quality


def _mean_gap(xa, ya, xb, yb, what: str) -> float:
    """Average of fb - fa over the common x range, f piecewise-cubic in x."""
    lo, hi = max(xa[0], xb[0]), min(xa[-1], xb[-1])
    if not lo < hi:
        raise ValueError(f"curves do not overlap in {what}")
    grid = np.linspace(lo, hi, BD_SAMPLES)
    fa = PchipInterpolator(xa, ya)(grid)
    fb = PchipInterpolator(xb, yb)(grid)
    return float(trapezoid(fb - fa, grid) / (hi - lo))


def bd_metrics(curve_a: Sequence[RdPoint], curve_b: Sequence[RdPoint]) -> tuple[float, float]:
    """(BD-Rate %, BD-PSNR dB) of curve_b relative to curve_a.

    Negative BD-Rate means curve_b needs fewer bits for the same quality.
    """
    ra, qa = _curve(curve_a)
    rb, qb = _curve(curve_b)
    log_gap = _mean_gap(qa, ra, qb, rb, "PSNR")
    bd_rate = (10.0**log_gap - 1.0) * 100.0
    bd_psnr = _mean_gap(ra, qa, rb, qb, "log-rate")
    return bd_rate, bd_psnr


# --------------------------------------------------------------- sweeps


def as_image(image) -> np.ndarray:
    return image.to_float() if isinstance(image, PpmImage) else np.asarray(image, dtype=np.float64)


def evaluate(
    anchor: AnchorModel,
    images: Iterable,
    label: str,
    layers: tuple[qz.StanhLayer, qz.StanhLayer] | None = None,
    ref: codec.LayerRef | None = None,
) -> RdPoint:
    """Encode every image; mean bpp (header included) and mean PSNR."""
    rates, qualities = [], []
    for image in images:
        x = as_image(image)
        result = codec.encode_image(x, anchor, layers, ref, return_details=True)
        rates.append(bpp(result.stream, x.shape[2], x.shape[1]))
        qualities.append(psnr(x, result.x_hat))
    if not rates:
        raise ValueError("no evaluation images")
    return RdPoint(float(np.mean(rates)), float(np.mean(qualities)), label)


def interpolation_label(d1: Derivation, d2: Derivation, rho: float) -> str:
    return f"{d1.derivation_id}-{d2.derivation_id}@{rho:.4f}"


def default_pairs(derivations: Sequence[Derivation]) -> list[tuple[Derivation, Derivation]]:
    """Neighbouring derivations of each anchor, ordered by decreasing lambda."""
    pairs = []
    for anchor_id in sorted({d.anchor_id for d in derivations}):
        group = sorted((d for d in derivations if d.anchor_id == anchor_id), key=lambda d: -d.lam)
        pairs.extend(zip(group, group[1:]))
    return pairs


def rd_sweep(
    anchors: Sequence[AnchorModel],
    derivations: Sequence[Derivation],
    rho_grid: Sequence[float],
    images: Sequence,
    pairs: Sequence[tuple[Derivation, Derivation]] | None = None,
) -> list[RdPoint]:
    """RdPoints for every anchor, derivation and interpolation, sorted by bpp.

    Interpolations run over `pairs` (default: neighbours in lambda) at each
    rho in `rho_grid`, with rho rounded to the bitstream's 16-bit code.
    """
    images = [as_image(im) for im in images]
    by_id = {a.anchor_id: a for a in anchors}
    points = [evaluate(a, images, a.anchor_id) for a in anchors]

    def anchor_of(d: Derivation) -> AnchorModel:
        if d.anchor_id not in by_id:
            raise KeyError(f"derivation {d.derivation_id} needs anchor {d.anchor_id}, which is not in the sweep")
        return by_id[d.anchor_id]

    for d in derivations:
        points.append(
            evaluate(anchor_of(d), images, d.derivation_id, (d.stanh_main, d.stanh_hyper),
                     codec.LayerRef.derivation(d.derivation_id))
        )
    for d1, d2 in default_pairs(derivations) if pairs is None else pairs:
        if d1.anchor_id != d2.anchor_id:
            raise ValueError("interpolation endpoints must share an anchor")
        for rho in rho_grid:
            ref = codec.LayerRef.interpolation(d1.derivation_id, d2.derivation_id, rho)
            layers = (
                qz.interpolate(d1.stanh_main, d2.stanh_main, ref.rho),
                qz.interpolate(d1.stanh_hyper, d2.stanh_hyper, ref.rho),
            )
            points.append(evaluate(anchor_of(d1), images, interpolation_label(d1, d2, ref.rho), layers, ref))
    return sorted(points, key=lambda p: (p.bpp, p.psnr, p.label))


def _uniform_point(anchor: AnchorModel, x: np.ndarray, delta: float) -> tuple[float, float]:
    height, width = x.shape[1:]
    padded, _, _ = codec.pad_image(x)
    with nx.no_grad():
        params, _ = mdl.constant_params(anchor)
        y = mdl.analysis(params, Tensor(padded[None])).data
        z = mdl.hyper_analysis(params, Tensor(y)).data
        z_hat = qz.uniform_step_quantize(z, delta)
        mu, sigma = mdl.hyper_synthesis(params, Tensor(z_hat), anchor.M)
        y_hat = qz.uniform_step_quantize(y, delta)
        x_hat = mdl.synthesis(params, Tensor(y_hat)).data
    half = delta / 2.0
    p_y = entropy.gaussian_interval_rate(y_hat, mu.data, sigma.data, half, half)
    zc = np.moveaxis(z_hat, 1, 0).reshape(anchor.N, -1)
    p_z = anchor.factorized.cdf(zc + half) - anchor.factorized.cdf(zc - half)
    p_z = np.clip(p_z, entropy.P_MIN, 1.0)
    bits = -np.sum(np.log2(np.minimum(p_y, 1.0))) - np.sum(np.log2(p_z)) + 8 * codec.FRAMING_BYTES
    x_hat = np.clip(x_hat[0, :, :height, :width], 0.0, 1.0)
    return float(bits) / (width * height), psnr(x, x_hat)


def uniform_baseline_sweep(anchor: AnchorModel, deltas: Sequence[float], images: Sequence) -> list[RdPoint]:
    """Both quantizers replaced by a uniform step of size delta.

    Rates are model estimates with each level's interval set to
    ``[value - delta/2, value + delta/2]``, plus the fixed header and length
    fields a real stream would carry; nothing is entropy coded.
    """
    images = [as_image(im) for im in images]
    if not images:
        raise ValueError("no evaluation images")
    points = []
    for delta in deltas:
        if not delta > 0:
            raise ValueError(f"step must be positive, got {delta}")
        pairs = [_uniform_point(anchor, x, float(delta)) for x in images]
        rate = float(np.mean([p[0] for p in pairs]))
        points.append(RdPoint(rate, float(np.mean([p[1] for p in pairs])), f"uniform@{delta:g}"))
    return points


# ------------------------------------------------------ interval analysis


@dataclass(frozen=True)
class IntervalRow:
    label: str
    offset: int  # signed distance in levels from the level nearest zero
    index: int
    value: float
    width: float  # r- + r+, infinite for the two outer levels


@dataclass
class IntervalReport:
    rows: list[IntervalRow]

    def labels(self) -> list[str]:
        return list(dict.fromkeys(r.label for r in self.rows))

    def for_label(self, label: str) -> list[IntervalRow]:
        return [r for r in self.rows if r.label == label]

    def central_width(self, label: str) -> float:
        (row,) = [r for r in self.rows if r.label == label and r.offset == 0]
        return row.width


def interval_widths(layer: qz.StanhLayer) -> np.ndarray:
    grid = qz.interval_bounds(layer)
    return grid.left_bounds + grid.right_bounds


def interval_report(layers: dict[str, qz.StanhLayer], center_count: int) -> IntervalReport:
    """Widths of the `center_count` levels nearest zero, per labeled layer."""
    if not layers:
        raise ValueError("no layers given")
    Ls = {layer.L for layer in layers.values()}
    if len(Ls) != 1:
        raise ValueError(f"layers have mismatched level counts {sorted(Ls)}")
    (L,) = Ls
    if not 1 <= center_count <= L:
        raise ValueError(f"center_count must be in [1, {L}], got {center_count}")
    rows = []
    for label, layer in layers.items():
        levels = layer.levels
        widths = interval_widths(layer)
        central = int(np.argmin(np.abs(levels)))
        order = np.lexsort((np.arange(L), np.abs(levels)))
        for i in sorted(order[:center_count].tolist()):
            rows.append(IntervalRow(label, i - central, i, float(levels[i]), float(widths[i])))
    return IntervalReport(rows)


# ------------------------------------------------------------------ CSV


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_rd_csv(points: Sequence[RdPoint], path) -> None:
    atomic_write(path, _csv_text(("label", "bpp", "psnr"), ((p.label, p.bpp, p.psnr) for p in points)))


def read_rd_csv(path) -> list[RdPoint]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [RdPoint(float(r["bpp"]), float(r["psnr"]), r["label"]) for r in csv.DictReader(fh)]


def write_bd_csv(rows: Sequence[tuple[str, str, float, float]], path) -> None:
    """Rows of (reference, test, BD-Rate %, BD-PSNR dB)."""
    atomic_write(path, _csv_text(("reference", "test", "bd_rate_percent", "bd_psnr_db"), rows))


def write_intervals_csv(report: IntervalReport, path) -> None:
    atomic_write(
        path,
        _csv_text(("level", "value", "width", "label"), ((r.offset, r.value, r.width, r.label) for r in report.rows)),
    )
