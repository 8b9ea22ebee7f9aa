"""Binary PPM (P6) reading and writing, 8-bit RGB only."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .io_utils import atomic_write


class PpmError(ValueError):
    pass


@dataclass
class PpmImage:
    width: int
    height: int
    samples: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.uint8)
        if self.samples.shape != (self.height, self.width, 3):
            raise PpmError(f"expected {self.height}x{self.width}x3 samples, got {self.samples.shape}")

    def to_float(self) -> np.ndarray:
        """(3, H, W) float64 in [0, 1]."""
        return self.samples.transpose(2, 0, 1).astype(np.float64) / 255.0

    @classmethod
    def from_float(cls, image: np.ndarray) -> "PpmImage":
        image = np.asarray(image, dtype=np.float64)
        samples = np.clip(np.floor(image * 255.0 + 0.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        return cls(samples.shape[1], samples.shape[0], samples)


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """First `count` whitespace-separated header tokens, skipping # comments.

    Returns the tokens and the offset of the single whitespace byte that
    terminates the last one.
    """
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise PpmError("truncated header")
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos


def parse_ppm(data: bytes) -> PpmImage:
    if data[:2] != b"P6":
        raise PpmError(f"not a binary PPM (magic {data[:2]!r}, expected b'P6')")
    tokens, pos = _tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PpmError(f"malformed header: {exc}") from None
    if width <= 0 or height <= 0:
        raise PpmError(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise PpmError(f"maxval must be 255 (8-bit samples), got {maxval}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PpmError("missing whitespace after header")
    pos += 1
    need = 3 * width * height
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise PpmError(f"truncated payload: {len(payload)} of {need} bytes")
    samples = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return PpmImage(width, height, samples.copy())


def load_ppm(path) -> PpmImage:
    with open(path, "rb") as fh:
        return parse_ppm(fh.read())


def ppm_bytes(image: PpmImage) -> bytes:
    return f"P6\n{image.width} {image.height}\n255\n".encode("ascii") + image.samples.tobytes()


def write_ppm(image: PpmImage, path) -> None:
    atomic_write(path, ppm_bytes(image))
