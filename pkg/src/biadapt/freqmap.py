"""YCbCr conversion and 8x8 blockwise DCT for the frequency branch.

Colour convention is full-range BT.601 on the [0, 1] scale::

    Y  = 0.299 R + 0.587 G + 0.114 B
    Cb = 0.5 + 0.564 (B - Y)
    Cr = 0.5 + 0.713 (R - Y)

The DCT is the orthonormal DCT-II applied to each non-overlapping 8x8 block.
No quantisation or zig-zag reordering is applied.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BLOCK = 8

Y_WEIGHTS = (0.299, 0.587, 0.114)
CB_SCALE = 0.564
CR_SCALE = 0.713


class DomainError(ValueError):
    pass


class ShapeError(ValueError):
    pass


def dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal DCT-II basis; row ``u`` holds the ``u``-th cosine."""
    x = np.arange(n)
    u = np.arange(n)[:, None]
    mat = np.cos(np.pi * (2 * x + 1) * u / (2 * n)) * np.sqrt(2.0 / n)
    mat[0] /= np.sqrt(2.0)
    return mat


_D = dct_matrix()


def rgb_to_ycbcr(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-1] != 3:
        raise ShapeError(f"expected trailing channel axis of size 3, got {image.shape}")
    if image.size and (image.min() < 0.0 or image.max() > 1.0 or not np.isfinite(image).all()):
        raise DomainError("rgb_to_ycbcr expects values in [0, 1]")
    r, g, b = image[..., 0], image[..., 1], image[..., 2]
    y = Y_WEIGHTS[0] * r + Y_WEIGHTS[1] * g + Y_WEIGHTS[2] * b
    cb = 0.5 + CB_SCALE * (b - y)
    cr = 0.5 + CR_SCALE * (r - y)
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    ycc = np.asarray(ycc, dtype=np.float64)
    y = ycc[..., 0]
    b = y + (ycc[..., 1] - 0.5) / CB_SCALE
    r = y + (ycc[..., 2] - 0.5) / CR_SCALE
    g = (y - Y_WEIGHTS[0] * r - Y_WEIGHTS[2] * b) / Y_WEIGHTS[1]
    return np.stack([r, g, b], axis=-1)


def _check_blocks(channel: np.ndarray) -> tuple[int, int]:
    if channel.ndim != 2:
        raise ShapeError(f"expected a 2-D channel, got shape {channel.shape}")
    h, w = channel.shape
    if h % BLOCK or w % BLOCK:
        raise ShapeError(f"channel shape {channel.shape} is not divisible by {BLOCK}")
    return h, w


def _blockwise(channel: np.ndarray, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    h, w = _check_blocks(channel)
    blocks = channel.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).transpose(0, 2, 1, 3)
    out = left @ blocks @ right
    return out.transpose(0, 2, 1, 3).reshape(h, w)


def block_dct8(channel: np.ndarray) -> np.ndarray:
    channel = np.asarray(channel, dtype=np.float64)
    return _blockwise(channel, _D, _D.T)


def block_idct8(coeffs: np.ndarray) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    return _blockwise(coeffs, _D.T, _D)


@dataclass(frozen=True)
class FrequencyConfig:
    block: int = BLOCK

    def __post_init__(self) -> None:
        if self.block != BLOCK:
            raise ValueError("only 8x8 blocks are supported")


@dataclass(frozen=True)
class FrequencyMap:
    """Blockwise DCT coefficients, H x W x 3 in Y, Cb, Cr order."""

    coeffs: np.ndarray

    def invert(self) -> np.ndarray:
        ycc = np.stack([block_idct8(self.coeffs[..., c]) for c in range(3)], axis=-1)
        return ycbcr_to_rgb(ycc)


def frequency_map(image: np.ndarray, cfg: FrequencyConfig | None = None) -> FrequencyMap:
    ycc = rgb_to_ycbcr(image)
    if ycc.ndim != 3:
        raise ShapeError(f"expected an H x W x 3 image, got {ycc.shape}")
    coeffs = np.stack([block_dct8(ycc[..., c]) for c in range(3)], axis=-1)
    return FrequencyMap(coeffs)
