"""Per-channel enhancement: Canny edges, histogram equalization, adaptive threshold.

Images are 2-D ``uint8`` arrays. Every convolution replicates edge pixels.
Canny and equalization run in exact integer arithmetic so results are
bit-identical across platforms; the adaptive mean is floating point, rounded
once.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import BlockTooLarge, ConfigError, InvalidThresholds

# rint(159 * G) for the sampled 5x5 Gaussian with sigma 1.4; sums to 159
GAUSS_5x5 = np.array(
    [[2, 4, 5, 4, 2],
     [4, 9, 12, 9, 4],
     [5, 12, 15, 12, 5],
     [4, 9, 12, 9, 4],
     [2, 4, 5, 4, 2]], dtype=np.int64)
GAUSS_SUM = 159

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.int64)
SOBEL_Y = SOBEL_X.T.copy()


@dataclass(frozen=True)
class EnhanceConfig:
    canny_low: int = 100
    canny_high: int = 200
    adaptive_block: int = 11
    adaptive_c: int = 2
    adaptive_max: int = 255

    def __post_init__(self):
        if not 0 <= self.canny_low < self.canny_high <= 255:
            raise InvalidThresholds(f"need 0 <= low < high <= 255, got {self.canny_low}, {self.canny_high}")
        if self.adaptive_block < 3 or self.adaptive_block % 2 == 0:
            raise ConfigError("adaptive_block must be odd and >= 3")
        if not 0 <= self.adaptive_max <= 255:
            raise ConfigError("adaptive_max must be within [0, 255]")


def as_gray(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("pixel values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def _correlate_int(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Exact integer correlation with replicated borders."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(img.astype(np.int64), ((ph, ph), (pw, pw)), mode="edge")
    h, w = img.shape
    out = np.zeros((h, w), dtype=np.int64)
    for i in range(kh):
        for j in range(kw):
            k = kernel[i, j]
            if k:
                out += k * padded[i:i + h, j:j + w]
    return out


def _shifted(a: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """``a[r+dr, c+dc]`` with indices clamped to the image."""
    h, w = a.shape
    rows = np.clip(np.arange(h) + dr, 0, h - 1)
    cols = np.clip(np.arange(w) + dc, 0, w - 1)
    return a[rows[:, None], cols[None, :]]


def gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sobel responses of the blurred image, scaled by the blur normalizer 159."""
    blurred = _correlate_int(as_gray(img), GAUSS_5x5)
    return _correlate_int(blurred, SOBEL_X), _correlate_int(blurred, SOBEL_Y)


def canny(img, low: int = 100, high: int = 200) -> np.ndarray:
    """Binary edge map (0/255).

    Blur, Sobel, L2 magnitude, 4-direction non-maximum suppression, double
    threshold, then 8-connected hysteresis.
    """
    if not 0 <= low < high:
        raise InvalidThresholds(f"need 0 <= low < high, got {low}, {high}")
    img = as_gray(img)
    gx, gy = gradients(img)
    mag2 = gx * gx + gy * gy
    ax, ay = np.abs(gx), np.abs(gy)

    # angle bins decided exactly: tan(22.5) = sqrt(2) - 1, tan(67.5) = sqrt(2) + 1
    horizontal = (ax + ay) ** 2 < 2 * ax * ax
    vertical = (ay > ax) & ((ay - ax) ** 2 > 2 * ax * ax)
    diag = ~horizontal & ~vertical
    rising = diag & (gx * gy > 0)
    falling = diag & ~rising

    keep = np.zeros(img.shape, dtype=bool)
    for mask, (dr, dc) in ((horizontal, (0, 1)), (vertical, (1, 0)),
                           (rising, (1, 1)), (falling, (1, -1))):
        before = _shifted(mag2, -dr, -dc)
        after = _shifted(mag2, dr, dc)
        keep |= mask & (mag2 > before) & (mag2 >= after)

    scale = GAUSS_SUM * GAUSS_SUM
    weak = keep & (mag2 >= low * low * scale)
    strong = keep & (mag2 >= high * high * scale)

    labels, count = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if count == 0:
        return np.zeros(img.shape, dtype=np.uint8)
    seeded = np.zeros(count + 1, dtype=bool)
    seeded[np.unique(labels[strong])] = True
    seeded[0] = False
    return np.where(seeded[labels], 255, 0).astype(np.uint8)


def equalize_lut(img) -> np.ndarray:
    """256-entry lookup table of the CDF remapping."""
    img = as_gray(img)
    n = img.size
    cdf = np.cumsum(np.bincount(img.ravel(), minlength=256)).astype(np.int64)
    cdf_min = int(cdf[np.flatnonzero(cdf)[0]])
    if cdf_min == n:
        return np.arange(256, dtype=np.uint8)
    num = (cdf - cdf_min).clip(min=0) * 255
    den = n - cdf_min
    # round half away from zero on non-negative rationals
    return ((2 * num + den) // (2 * den)).astype(np.uint8)


def equalize_hist(img) -> np.ndarray:
    img = as_gray(img)
    return equalize_lut(img)[img]


def gaussian_window(block: int) -> np.ndarray:
    sigma = 0.3 * ((block - 1) / 2 - 1) + 0.8
    x = np.arange(block) - (block - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def local_mean(img, block: int) -> np.ndarray:
    """Gaussian-weighted neighbourhood mean, unrounded."""
    g = gaussian_window(block)
    f = as_gray(img).astype(np.float64)
    f = ndimage.correlate1d(f, g, axis=1, mode="nearest")
    return ndimage.correlate1d(f, g, axis=0, mode="nearest")


def adaptive_threshold(img, cfg: EnhanceConfig = EnhanceConfig()) -> np.ndarray:
    """Binary map: ``adaptive_max`` where pixel > rounded local mean - C.

    When the block does not fit the image, the global mean is used instead and
    a :class:`BlockTooLarge` warning is emitted.
    """
    img = as_gray(img)
    if cfg.adaptive_block > min(img.shape):
        warnings.warn(BlockTooLarge(
            f"block {cfg.adaptive_block} exceeds image {img.shape[1]}x{img.shape[0]}; using global mean"
        ))
        mean = np.full(img.shape, img.mean(dtype=np.float64))
    else:
        mean = local_mean(img, cfg.adaptive_block)
    threshold = np.floor(mean + 0.5).astype(np.int64) - cfg.adaptive_c
    return np.where(img.astype(np.int64) > threshold, cfg.adaptive_max, 0).astype(np.uint8)
