"""Lanczos resizing, RGB channel fusion and deterministic PNG encoding."""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .enhance import as_gray
from .errors import ConfigError, EncodeError, InvalidTarget, SizeMismatch

LANCZOS_A = 3
CHANNELS = ("r", "g", "b")
# feature imaged into each of R, G, B
DEFAULT_CHANNEL_MAP = ("dex", "manifest", "api")


def lanczos(x: np.ndarray, a: int = LANCZOS_A) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.where(np.abs(x) < a, np.sinc(x) * np.sinc(x / a), 0.0)
    # snap integer taps so unit-scale resampling is an exact impulse
    ints = x == np.round(x)
    return np.where(ints, (x == 0).astype(np.float64), out)


def resample_weights(in_size: int, out_size: int) -> sparse.csr_matrix:
    """Row ``i`` holds the normalized taps producing output sample ``i``."""
    scale = in_size / out_size
    filterscale = max(scale, 1.0)
    support = LANCZOS_A * filterscale
    rows, cols, vals = [], [], []
    for i in range(out_size):
        center = (i + 0.5) * scale
        lo = max(math.floor(center - support + 0.5), 0)
        hi = min(math.floor(center + support + 0.5), in_size)
        xs = np.arange(lo, hi)
        w = lanczos((xs - center + 0.5) / filterscale)
        total = w.sum()
        if total == 0:
            # degenerate window: nearest sample
            xs = np.array([min(int(center), in_size - 1)])
            w = np.ones(1)
            total = 1.0
        rows.extend([i] * len(xs))
        cols.extend(xs.tolist())
        vals.extend((w / total).tolist())
    return sparse.csr_matrix((vals, (rows, cols)), shape=(out_size, in_size))


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def lanczos_resize(img, out_w: int, out_h: int) -> np.ndarray:
    """Separable Lanczos-3 resize; float throughout, rounded once at the end."""
    if out_w < 1 or out_h < 1:
        raise InvalidTarget(f"target {out_w}x{out_h} must be at least 1x1")
    src = as_gray(img).astype(np.float64)
    h, w = src.shape
    if (w, h) == (out_w, out_h):
        return src.astype(np.uint8)
    horiz = resample_weights(w, out_w)
    vert = resample_weights(h, out_h)
    tmp = (horiz @ src.T).T          # h x out_w
    out = vert @ tmp                 # out_h x out_w
    return round_half_away(np.clip(out, 0, 255)).astype(np.uint8)


@dataclass(frozen=True)
class FuseConfig:
    target: int = 256
    channel_mask: frozenset = field(default_factory=lambda: frozenset(CHANNELS))
    channel_map: tuple = DEFAULT_CHANNEL_MAP
    rebinarize: bool = False

    def __post_init__(self):
        if self.target < 8:
            raise ConfigError("fusion target must be >= 8")
        if not set(self.channel_mask) <= set(CHANNELS):
            raise ConfigError(f"unknown channels in mask {sorted(self.channel_mask)}")
        if sorted(self.channel_map) != sorted(DEFAULT_CHANNEL_MAP):
            raise ConfigError(f"channel map must be a permutation of {DEFAULT_CHANNEL_MAP}")


def parse_channel_mask(mask: str) -> frozenset:
    mask = mask.lower()
    if mask == "rgb":
        return frozenset(CHANNELS)
    if not mask or any(c not in CHANNELS for c in mask) or len(set(mask)) != len(mask):
        raise ConfigError(f"bad channel mask {mask!r}; use letters from 'rgb'")
    return frozenset(mask)


def merge_rgb(dex_gray, manifest_gray, api_gray, cfg: FuseConfig = FuseConfig()) -> np.ndarray:
    planes = {"dex": as_gray(dex_gray), "manifest": as_gray(manifest_gray), "api": as_gray(api_gray)}
    shapes = {p.shape for p in planes.values()}
    if len(shapes) != 1:
        raise SizeMismatch(f"channel planes differ in size: {sorted(shapes)}")
    shape = shapes.pop()
    out = np.zeros(shape + (3,), dtype=np.uint8)
    for k, (channel, feature) in enumerate(zip(CHANNELS, cfg.channel_map)):
        if channel in cfg.channel_mask:
            out[..., k] = planes[feature]
    return out


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))


def encode_png(img) -> bytes:
    """Encode an 8-bit RGB (H x W x 3) or gray (H x W) array.

    Every scanline uses the Up filter and the data goes into one IDAT chunk
    at zlib level 9, so equal images give equal bytes.
    """
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        raise EncodeError(f"expected uint8 pixels, got {arr.dtype}")
    if arr.ndim == 3 and arr.shape[2] == 3:
        color_type = 2
    elif arr.ndim == 2:
        color_type = 0
    else:
        raise EncodeError(f"unsupported image shape {arr.shape}")
    h, w = arr.shape[:2]
    if h < 1 or w < 1:
        raise EncodeError("empty image")
    rows = arr.reshape(h, -1)
    prev = np.vstack([np.zeros((1, rows.shape[1]), dtype=np.uint8), rows[:-1]])
    up = rows - prev  # uint8 arithmetic wraps mod 256 as the filter requires
    raw = np.hstack([np.full((h, 1), 2, dtype=np.uint8), up]).tobytes()
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n" + _chunk(b"IHDR", ihdr)
            + _chunk(b"IDAT", zlib.compress(raw, 9)) + _chunk(b"IEND", b""))
