"""Byte buffer to grayscale image, one byte per pixel."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyInput

KB = 1024


@dataclass(frozen=True)
class WidthTable:
    """Size buckets: the first ``(max_bytes, width)`` with ``len < max_bytes`` wins.

    Inputs at or above the last threshold use ``fallback``.
    """

    buckets: tuple[tuple[int, int], ...]
    fallback: int

    def __post_init__(self):
        limits = [b for b, _ in self.buckets]
        widths = [w for _, w in self.buckets] + [self.fallback]
        if any(a >= b for a, b in zip(limits, limits[1:])):
            raise ConfigError("width table thresholds must be strictly increasing")
        if any(a >= b for a, b in zip(widths, widths[1:])) or widths[0] < 1:
            raise ConfigError("width table widths must be positive and strictly increasing")

    def width_for(self, n: int) -> int:
        for limit, width in self.buckets:
            if n < limit:
                return width
        return self.fallback


DEFAULT_WIDTH_TABLE = WidthTable(
    buckets=(
        (10 * KB, 32),
        (30 * KB, 64),
        (60 * KB, 128),
        (100 * KB, 256),
        (200 * KB, 384),
        (500 * KB, 512),
        (1000 * KB, 768),
    ),
    fallback=1024,
)


def bytes_to_gray(data: bytes, table: WidthTable = DEFAULT_WIDTH_TABLE,
                  width: int | None = None) -> np.ndarray:
    """Lay ``data`` out row-major as a ``uint8`` image, zero-padding the last row.

    ``width`` forces the row length instead of consulting ``table``.
    """
    n = len(data)
    if n == 0:
        raise EmptyInput("cannot image an empty buffer")
    w = width if width is not None else table.width_for(n)
    h = math.ceil(n / w)
    flat = np.zeros(w * h, dtype=np.uint8)
    flat[:n] = np.frombuffer(bytes(data), dtype=np.uint8)
    return flat.reshape(h, w)
