"""Byte-oriented range coder with 32-bit state and carry propagation.

Frequencies come from integer tables whose counts sum to ``2**precision``.
The encoder keeps a 33-bit ``low`` plus a pending byte and a run of 0xFF
bytes so that carries can be resolved without re-reading output; the decoder
mirrors it with a 32-bit ``code`` register. Renormalization happens whenever
the range drops below 2**24, so every coding step works with at least 24
bits of range.
"""

from __future__ import annotations

from bisect import bisect_right
from typing import Sequence

import numpy as np

from .entropy import CodingTable

TOP = 1 << 24
MASK32 = 0xFFFFFFFF
FLUSH_BYTES = 5


class RangeCoderError(ValueError):
    pass


def _cumulative_rows(tables, n_symbols: int | None = None) -> tuple[list[list[int]], int]:
    """Normalize the table argument to per-symbol cumulative lists."""
    if isinstance(tables, CodingTable):
        cum = tables.cumulative.tolist()
        if n_symbols is None:
            raise ValueError("a single table needs an explicit symbol count")
        return [cum] * n_symbols, tables.precision
    if isinstance(tables, tuple) and len(tables) == 2 and isinstance(tables[1], int):
        counts, precision = tables
        counts = np.asarray(counts, dtype=np.int64)
        cum = np.concatenate([np.zeros((counts.shape[0], 1), dtype=np.int64), np.cumsum(counts, axis=1)], axis=1)
        return cum.tolist(), precision
    tables = list(tables)
    if not tables:
        return [], 16
    precision = tables[0].precision
    if any(t.precision != precision for t in tables):
        raise ValueError("all tables must share one precision")
    cache: dict[int, list[int]] = {}
    rows = []
    for t in tables:
        key = id(t)
        if key not in cache:
            cache[key] = t.cumulative.tolist()
        rows.append(cache[key])
    return rows, precision


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            self.out.append((self.cache + carry) & 0xFF)
            for _ in range(self.cache_size - 1):
                self.out.append((0xFF + carry) & 0xFF)
            self.cache_size = 0
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & MASK32

    def encode(self, start: int, size: int, precision: int) -> None:
        r = self.range >> precision
        self.low += r * start
        self.range = r * size
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(FLUSH_BYTES):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(FLUSH_BYTES):
            self.code = ((self.code << 8) | self._next()) & MASK32

    def _next(self) -> int:
        if self.pos >= len(self.data):
            raise RangeCoderError("truncated range-coded payload")
        byte = self.data[self.pos]
        self.pos += 1
        return byte

    def decode(self, cum: list[int], precision: int) -> int:
        r = self.range >> precision
        value = self.code // r
        if value >= (1 << precision):
            raise RangeCoderError("corrupted payload (decoder value out of range)")
        symbol = bisect_right(cum, value) - 1
        self.code -= r * cum[symbol]
        self.range = r * (cum[symbol + 1] - cum[symbol])
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next()) & MASK32
            self.range <<= 8
        return symbol


def range_encode(symbols: Sequence[int], tables) -> bytes:
    """Encode level indices, symbol i under table i.

    `tables` is a sequence of `CodingTable`, a single table (shared by all
    symbols), or a ``(counts, precision)`` pair with one count row per symbol.
    """
    symbols = [int(s) for s in np.asarray(symbols).reshape(-1)]
    rows, precision = _cumulative_rows(tables, len(symbols))
    if len(rows) != len(symbols):
        raise ValueError(f"{len(symbols)} symbols but {len(rows)} tables")
    enc = RangeEncoder()
    for s, cum in zip(symbols, rows):
        if not 0 <= s < len(cum) - 1:
            raise RangeCoderError(f"symbol {s} outside table with {len(cum) - 1} levels")
        start = cum[s]
        enc.encode(start, cum[s + 1] - start, precision)
    return enc.finish()


def range_decode(data: bytes, tables, n_symbols: int) -> list[int]:
    rows, precision = _cumulative_rows(tables, n_symbols)
    if len(rows) != n_symbols:
        raise ValueError(f"{n_symbols} symbols requested but {len(rows)} tables given")
    dec = RangeDecoder(data)
    return [dec.decode(cum, precision) for cum in rows]
