"""Image preprocessing chain applied before both training phases.

The chain is grayscale -> nearest-neighbor resize -> CLAHE -> min-max
normalization -> gamma correction.  CLAHE operates on 8-bit histograms,
so normalization to [0, 1] runs after it; stage parameters live in
PreprocessConfig and every stage is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: int = 64
    clahe_tiles: int = 8
    clahe_clip: float = 2.0
    gamma: float = 1.2

    def validate(self):
        if self.target_size < 1:
            raise ParameterError(f"target_size must be >= 1, got {self.target_size}")
        if self.clahe_tiles < 1:
            raise ParameterError(f"clahe_tiles must be >= 1, got {self.clahe_tiles}")
        if self.clahe_clip < 1.0:
            raise ParameterError(f"clahe_clip must be >= 1, got {self.clahe_clip}")
        if self.gamma <= 0.0:
            raise ParameterError(f"gamma must be > 0, got {self.gamma}")


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Luma conversion 0.299 R + 0.587 G + 0.114 B, rounded half-up."""
    img = np.asarray(img)
    if img.ndim == 2:
        return img.astype(np.uint8, copy=False)
    if img.ndim == 3 and img.shape[2] == 3:
        r, g, b = LUMA_WEIGHTS
        gray = r * img[:, :, 0] + g * img[:, :, 1] + b * img[:, :, 2]
        return np.floor(gray + 0.5).astype(np.uint8)
    raise FormatError(f"expected 1 or 3 channels, got array of shape {img.shape}")


def normalize_minmax(img: np.ndarray) -> np.ndarray:
    """Affine map to [0, 1]; a constant image maps to all zeros."""
    img = np.asarray(img, dtype=np.float64)
    if img.size == 0:
        raise ParameterError("cannot normalize an empty image")
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def gamma_correct(img: np.ndarray, gamma: float) -> np.ndarray:
    """Elementwise v ** gamma on values in [0, 1]."""
    if gamma <= 0.0:
        raise ParameterError(f"gamma must be > 0, got {gamma}")
    return np.asarray(img, dtype=np.float64) ** gamma


def resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize via floor index mapping (dtype preserved)."""
    img = np.asarray(img)
    src_h, src_w = img.shape[:2]
    rows = (np.arange(out_h) * src_h) // out_h
    cols = (np.arange(out_w) * src_w) // out_w
    return img[rows[:, None], cols[None, :]]


def _tile_mapping(hist: np.ndarray, limit: float, npix: int) -> np.ndarray:
    """Equalization map for one tile from its clipped 256-bin histogram.

    Counts above ``limit`` are clipped and the total excess is spread
    uniformly over all bins; the map is the rounded rescaled CDF.  The
    loop is deliberately sequential so the arithmetic is reproducible
    bin by bin (the test suite holds a scalar reference to byte-exact
    agreement).
    """
    mapping = np.empty(256, dtype=np.float64)
    excess = 0.0
    for v in range(256):
        if hist[v] > limit:
            excess += hist[v] - limit
    redist = excess / 256.0
    cum = 0.0
    for v in range(256):
        count = limit if hist[v] > limit else float(hist[v])
        cum += count + redist
        level = math.floor(255.0 * cum / npix + 0.5)
        mapping[v] = min(max(level, 0), 255)
    return mapping


def clahe(img: np.ndarray, tiles: int = 8, clip_limit: float = 2.0) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on an 8-bit image.

    The image is split into a tiles x tiles grid (edge-replicated to a
    multiple of the grid first if needed, cropped back after); each tile
    gets a clipped-histogram equalization map, and every output pixel
    bilinearly interpolates the maps of the four surrounding tile
    centers, clamped at the borders.
    """
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise FormatError(f"clahe expects a 2-d uint8 image, got {img.dtype} {img.shape}")
    if tiles < 1:
        raise ParameterError(f"tile grid must be >= 1, got {tiles}")
    if clip_limit < 1.0:
        raise ParameterError(f"clip_limit must be >= 1, got {clip_limit}")
    h, w = img.shape
    if tiles > h or tiles > w:
        raise ParameterError(f"{tiles}x{tiles} grid does not fit a {h}x{w} image")

    pad_h = (-h) % tiles
    pad_w = (-w) % tiles
    work = np.pad(img, ((0, pad_h), (0, pad_w)), mode="edge") if pad_h or pad_w else img
    wh, ww = work.shape
    th, tw = wh // tiles, ww // tiles
    npix = th * tw
    limit = clip_limit * npix / 256.0

    maps = np.empty((tiles, tiles, 256), dtype=np.float64)
    for ti in range(tiles):
        for tj in range(tiles):
            tile = work[ti * th:(ti + 1) * th, tj * tw:(tj + 1) * tw]
            hist = np.bincount(tile.reshape(-1), minlength=256)
            maps[ti, tj] = _tile_mapping(hist, limit, npix)

    # fractional tile coordinates of each pixel relative to tile centers
    ty = (np.arange(wh) + 0.5) / th - 0.5
    tx = (np.arange(ww) + 0.5) / tw - 0.5
    y0 = np.clip(np.floor(ty).astype(np.int64), 0, tiles - 1)
    x0 = np.clip(np.floor(tx).astype(np.int64), 0, tiles - 1)
    y1 = np.minimum(y0 + 1, tiles - 1)
    x1 = np.minimum(x0 + 1, tiles - 1)
    wy = ty - np.floor(ty)
    wx = tx - np.floor(tx)

    m00 = maps[y0[:, None], x0[None, :], work]
    m01 = maps[y0[:, None], x1[None, :], work]
    m10 = maps[y1[:, None], x0[None, :], work]
    m11 = maps[y1[:, None], x1[None, :], work]
    w00 = (1.0 - wy)[:, None] * (1.0 - wx)[None, :]
    w01 = (1.0 - wy)[:, None] * wx[None, :]
    w10 = wy[:, None] * (1.0 - wx)[None, :]
    w11 = wy[:, None] * wx[None, :]
    blended = w00 * m00 + w01 * m01 + w10 * m10 + w11 * m11
    out = np.clip(np.floor(blended + 0.5), 0, 255).astype(np.uint8)
    return out[:h, :w]


def preprocess_pipeline(img: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Full chain; returns a float64 (target, target) image in [0, 1]."""
    cfg.validate()
    gray = to_grayscale(img)
    resized = resize_nearest(gray, cfg.target_size, cfg.target_size)
    equalized = clahe(resized, tiles=cfg.clahe_tiles, clip_limit=cfg.clahe_clip)
    normalized = normalize_minmax(equalized)
    return gamma_correct(normalized, cfg.gamma)
