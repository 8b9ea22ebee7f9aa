"""Bitstream format and the encode/decode pipeline.

Layout, all little-endian::

    "SVRC"  version u8  anchor u16  mode u8  first u16  second u16  rho u16
    width u32  height u32  pad_right u8  pad_bottom u8
    hyper payload: u32 length + bytes
    main payload:  u32 length + bytes

``mode`` is 0 for the anchor's own quantizers, 1 for a stored derivation
(``first`` is its number) and 2 for an interpolation between derivations
``first`` and ``second`` at ``rho / 65535``. Ids travel as the numeric part
of ``A<n>`` / ``D<n>``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import entropy
from . import model as mdl
from . import quantizer as qz
from .model import AnchorModel
from .model_io import Registry, format_id, parse_id
from .rangecoder import range_decode, range_encode

MAGIC = b"SVRC"
VERSION = 1
MODE_ANCHOR, MODE_DERIVATION, MODE_INTERPOLATION = 0, 1, 2
RHO_SCALE = 0xFFFF

_HEADER = struct.Struct("<4sBHBHHHIIBB")
HEADER_BYTES = _HEADER.size
_LENGTH = struct.Struct("<I")
FRAMING_BYTES = HEADER_BYTES + 2 * _LENGTH.size


class BitstreamError(ValueError):
    pass


@dataclass(frozen=True)
class LayerRef:
    """Which quantizer pair a stream was coded with."""

    mode: int = MODE_ANCHOR
    first: int = 0
    second: int = 0
    rho_code: int = 0

    def __post_init__(self):
        if self.mode not in (MODE_ANCHOR, MODE_DERIVATION, MODE_INTERPOLATION):
            raise ValueError(f"unknown layer mode {self.mode}")
        for v in (self.first, self.second, self.rho_code):
            if not 0 <= v <= 0xFFFF:
                raise ValueError("layer reference fields must fit in u16")

    @property
    def rho(self) -> float:
        return self.rho_code / RHO_SCALE

    @classmethod
    def derivation(cls, derivation_id: str) -> "LayerRef":
        return cls(MODE_DERIVATION, parse_id(derivation_id, "D"))

    @classmethod
    def interpolation(cls, from_id: str, to_id: str, rho: float) -> "LayerRef":
        """ρ is stored as round(ρ · 65535); the coded layer uses that value."""
        if not 0.0 <= rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {rho}")
        return cls(MODE_INTERPOLATION, parse_id(from_id, "D"), parse_id(to_id, "D"), int(round(rho * RHO_SCALE)))


@dataclass(frozen=True)
class Header:
    anchor: int
    ref: LayerRef
    width: int
    height: int
    pad_right: int
    pad_bottom: int
    version: int = VERSION

    @property
    def anchor_id(self) -> str:
        return format_id(self.anchor, "A")


@dataclass(frozen=True)
class Bitstream:
    header: Header
    hyper: bytes
    main: bytes

    def to_bytes(self) -> bytes:
        h = self.header
        head = _HEADER.pack(
            MAGIC, h.version, h.anchor, h.ref.mode, h.ref.first, h.ref.second, h.ref.rho_code,
            h.width, h.height, h.pad_right, h.pad_bottom,
        )
        return head + _LENGTH.pack(len(self.hyper)) + self.hyper + _LENGTH.pack(len(self.main)) + self.main

    def __len__(self) -> int:
        return FRAMING_BYTES + len(self.hyper) + len(self.main)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER_BYTES:
            raise BitstreamError(f"stream too short for a header ({len(data)} bytes)")
        magic, version, anchor, mode, first, second, rho, width, height, pr, pb = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise BitstreamError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise BitstreamError(f"unsupported bitstream version {version}")
        try:
            ref = LayerRef(mode, first, second, rho)
        except ValueError as exc:
            raise BitstreamError(str(exc)) from None
        if width == 0 or height == 0:
            raise BitstreamError("zero image dimension in header")
        header = Header(anchor, ref, width, height, pr, pb, version)
        pos = HEADER_BYTES
        payloads = []
        for name in ("hyper", "main"):
            if len(data) < pos + _LENGTH.size:
                raise BitstreamError(f"truncated {name} payload length")
            (length,) = _LENGTH.unpack_from(data, pos)
            pos += _LENGTH.size
            if len(data) < pos + length:
                raise BitstreamError(f"truncated {name} payload ({len(data) - pos} of {length} bytes)")
            payloads.append(bytes(data[pos : pos + length]))
            pos += length
        if pos != len(data):
            raise BitstreamError(f"{len(data) - pos} trailing bytes after main payload")
        return cls(header, *payloads)


# ---------------------------------------------------------------- tables


def _hyper_counts(model: AnchorModel, z_shape, precision: int) -> np.ndarray:
    grid = qz.interval_bounds(model.stanh_hyper)
    per_channel = entropy.factorized_tables(model.factorized, grid, precision)
    n = int(np.prod(z_shape[2:]))
    return np.repeat(per_channel, n, axis=0)


def _main_counts(model: AnchorModel, mu, sigma, precision: int, scale_table) -> np.ndarray:
    grid = qz.interval_bounds(model.stanh_main)
    return entropy.conditional_tables(mu, sigma, grid, scale_table, precision)


def scale_table_for(model: AnchorModel) -> np.ndarray:
    """The sigma table recorded with the anchor, or the default one.

    It lives with the anchor (not the stream) so encoder and decoder
    always agree on it.
    """
    params = model.meta.get("scale_table")
    if params is None:
        return entropy.default_scale_table()
    lo, hi, count = params
    return entropy.default_scale_table(int(count), float(lo), float(hi))


def pad_amounts(width: int, height: int) -> tuple[int, int]:
    return (-width) % mdl.DOWNSAMPLE, (-height) % mdl.DOWNSAMPLE


def pad_image(x: np.ndarray) -> tuple[np.ndarray, int, int]:
    """Reflect-pad (3, H, W) on the right and bottom to the stride multiple."""
    pr, pb = pad_amounts(x.shape[2], x.shape[1])
    if pr or pb:
        x = np.pad(x, ((0, 0), (0, pb), (0, pr)), mode="reflect" if min(x.shape[1:]) > 1 else "edge")
    return x, pr, pb


# ---------------------------------------------------------------- coding


@dataclass
class EncodeResult:
    stream: Bitstream
    hard: mdl.HardResult
    x_hat: np.ndarray  # cropped and clamped, what the decoder will return

    @property
    def num_bytes(self) -> int:
        return len(self.stream)


def encode_image(
    x,
    anchor: AnchorModel,
    layers: tuple[qz.StanhLayer, qz.StanhLayer] | None = None,
    ref: LayerRef | None = None,
    precision: int = entropy.DEFAULT_PRECISION,
    scale_table=None,
    return_details: bool = False,
):
    """Compress a (3, H, W) image in [0, 1].

    `layers` defaults to the anchor's own quantizers; `ref` is what the
    header records so a decoder can find the same layers in its registry.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {x.shape}")
    height, width = x.shape[1:]
    if width > 0xFFFFFFFF or height > 0xFFFFFFFF or width == 0 or height == 0:
        raise ValueError(f"unsupported image size {width}x{height}")
    if ref is None:
        ref = LayerRef()
    if ref.mode == MODE_ANCHOR and layers is not None:
        if not (layers[0] == anchor.stanh_main and layers[1] == anchor.stanh_hyper):
            raise ValueError("custom layers need a derivation or interpolation reference")
    work = anchor if layers is None else anchor.with_layers(*layers)
    table = scale_table_for(anchor) if scale_table is None else scale_table

    padded, pr, pb = pad_image(x)
    hard = mdl.forward_hard(padded, work)
    hyper = range_encode(hard.z_idx, (_hyper_counts(work, hard.z_idx.shape, precision), precision))
    main = range_encode(hard.y_idx, (_main_counts(work, hard.mu, hard.sigma, precision, table), precision))
    header = Header(parse_id(anchor.anchor_id, "A"), ref, width, height, pr, pb)
    stream = Bitstream(header, hyper, main)
    if not return_details:
        return stream
    x_hat = np.clip(hard.x_hat[0, :, :height, :width], 0.0, 1.0)
    return EncodeResult(stream, hard, x_hat)


def resolve_layers(registry: Registry, header: Header) -> AnchorModel:
    """The anchor from the registry with the header's quantizers plugged in."""
    anchor = registry.load_anchor(header.anchor_id)
    ref = header.ref
    if ref.mode == MODE_ANCHOR:
        return anchor
    first = registry.load_derivation(header.anchor_id, format_id(ref.first, "D"))
    if ref.mode == MODE_DERIVATION:
        return first.apply(anchor)
    second = registry.load_derivation(header.anchor_id, format_id(ref.second, "D"))
    main = qz.interpolate(first.stanh_main, second.stanh_main, ref.rho)
    hyper = qz.interpolate(first.stanh_hyper, second.stanh_hyper, ref.rho)
    return anchor.with_layers(main, hyper)


def decode_with_model(
    stream: Bitstream,
    model: AnchorModel,
    precision: int = entropy.DEFAULT_PRECISION,
    scale_table=None,
) -> np.ndarray:
    h = stream.header
    table = scale_table_for(model) if scale_table is None else scale_table
    ph, pw = h.height + h.pad_bottom, h.width + h.pad_right
    if ph % mdl.DOWNSAMPLE or pw % mdl.DOWNSAMPLE:
        raise BitstreamError("padded size in header is not a multiple of the stride")
    z_shape = (1, model.N, ph // mdl.DOWNSAMPLE, pw // mdl.DOWNSAMPLE)
    y_scale = 2**mdl.MAIN_STAGES
    y_shape = (1, model.M, ph // y_scale, pw // y_scale)

    z_counts = _hyper_counts(model, z_shape, precision)
    z_idx = np.array(range_decode(stream.hyper, (z_counts, precision), z_counts.shape[0])).reshape(z_shape)
    _, mu, sigma = mdl.hyper_decode(model, z_idx)
    y_counts = _main_counts(model, mu, sigma, precision, table)
    y_idx = np.array(range_decode(stream.main, (y_counts, precision), y_counts.shape[0])).reshape(y_shape)
    _, x_hat = mdl.synthesize(model, y_idx)
    return np.clip(x_hat[0, :, : h.height, : h.width], 0.0, 1.0)


def decode_image(stream, registry: Registry, **kwargs) -> np.ndarray:
    """Reconstruct (3, H, W) in [0, 1] from a stream (object or bytes)."""
    if not isinstance(stream, Bitstream):
        stream = Bitstream.from_bytes(bytes(stream))
    return decode_with_model(stream, resolve_layers(registry, stream.header), **kwargs)
