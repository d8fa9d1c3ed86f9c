"""Sample complexity via lossless PNG size, plus the differentiable
high-frequency DCT proxy and the Gaussian blur used by black-box probes.

Complexity of an image-shaped sample is the encoded PNG byte count divided
by the pixel count.  Absolute values depend on encoder settings, so the
filter heuristic and DEFLATE level are pinned (and configurable) rather
than left to a library default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .png import ADAPTIVE, encode_png


class ShapeMismatch(ValueError):
    pass


def is_image_shape(shape) -> bool:
    return len(shape) == 3 and shape[0] in (1, 3)


def _require_image(shape):
    if not is_image_shape(shape):
        raise ShapeMismatch(
            f"expected an image shape (channels, height, width), got {tuple(shape)}"
        )


@dataclass
class QuantizedImage:
    """8-bit pixel grid in PNG layout: (H, W) for grayscale, (H, W, 3) for RGB."""

    pixels: np.ndarray
    height: int
    width: int
    channels: int

    def __post_init__(self):
        if self.pixels.dtype != np.uint8:
            raise ShapeMismatch("quantized pixels must be uint8")
        expected = (
            (self.height, self.width)
            if self.channels == 1
            else (self.height, self.width, self.channels)
        )
        if self.pixels.shape != expected:
            raise ShapeMismatch(
                f"pixel grid {self.pixels.shape} does not match {expected}"
            )


def quantize_image(x, shape) -> QuantizedImage:
    """Map a flat sample in [-1, 1] to 8-bit pixels (round half to even)."""
    _require_image(shape)
    c, h, w = shape
    x = np.asarray(x, dtype=np.float64).reshape(c, h, w)
    levels = np.rint((x + 1.0) * 127.5)
    pixels = np.clip(levels, 0, 255).astype(np.uint8)
    if c == 1:
        grid = pixels[0]
    else:
        grid = np.moveaxis(pixels, 0, -1)
    return QuantizedImage(grid, h, w, c)


def complexity_png(x, shape, filter_mode: str = ADAPTIVE, level: int = 9) -> float:
    """size(PNG(x)) / D for an image-shaped sample in [-1, 1]."""
    img = quantize_image(x, shape)
    data = encode_png(img.pixels, filter_mode=filter_mode, level=level)
    return len(data) / (img.height * img.width * img.channels)


# ---------------------------------------------------------------------------
# Orthonormal 2-D DCT (type II) and the high-frequency energy proxy.


@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    m = np.arange(n)[None, :]
    mat = np.cos(np.pi * (2 * m + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    mat[0] *= math.sqrt(0.5)
    return mat


@lru_cache(maxsize=None)
def _flat_dct_operator(shape: tuple) -> np.ndarray:
    """Whole-image DCT as one (D, D) matrix: per-channel kron(C_H, C_W)."""
    c, h, w = shape
    block = np.kron(dct_matrix(h), dct_matrix(w))
    if c == 1:
        return block
    d = c * h * w
    out = np.zeros((d, d))
    for ch in range(c):
        sl = slice(ch * h * w, (ch + 1) * h * w)
        out[sl, sl] = block
    return out


@lru_cache(maxsize=None)
def _hf_mask(shape: tuple) -> np.ndarray:
    """1 on coefficients whose row and column indices are both >= half-size."""
    c, h, w = shape
    mask = np.zeros((c, h, w))
    mask[:, h // 2 :, w // 2 :] = 1.0
    return mask.ravel()


def dct2(x, shape=None):
    """Orthonormal 2-D DCT per channel.

    Arrays come in as (H, W), (C, H, W), or flat with ``shape`` given, and
    the coefficients come back in the same layout.  A taped Var (flat,
    ``shape`` required) goes through the fixed linear map so attacks can
    differentiate the high-frequency objective.
    """
    if isinstance(x, ad.Var):
        _require_image(shape)
        if np.shape(x.value) != (int(np.prod(shape)),):
            raise ShapeMismatch(
                f"flat sample of length {np.shape(x.value)} does not match {shape}"
            )
        return ad.matvec(_flat_dct_operator(tuple(shape)), x)
    x = np.asarray(x, dtype=np.float64)
    if shape is not None:
        x = x.reshape(tuple(shape))
    if x.ndim == 2:
        return dct_matrix(x.shape[0]) @ x @ dct_matrix(x.shape[1]).T
    if x.ndim == 3:
        ch = dct_matrix(x.shape[1])
        cw = dct_matrix(x.shape[2])
        return np.einsum("ij,cjk,lk->cil", ch, x, cw)
    raise ShapeMismatch(f"dct2 expects an image, got ndim={x.ndim}")


def hf_energy(x, shape):
    """Squared norm of the DCT coefficient quadrant with both indices >= half.

    Differentiable for taped inputs (the transform is a fixed linear map and
    the quadrant restriction is a constant mask).
    """
    _require_image(shape)
    c, h, w = shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"hf_energy needs even image dimensions, got {h}x{w}")
    if isinstance(x, ad.Var):
        coeffs = dct2(x, shape)
        return ad.vsum(ad.square(ad.mul(coeffs, _hf_mask(tuple(shape)))))
    coeffs = dct2(np.asarray(x, dtype=np.float64).reshape(c, h, w))
    block = coeffs[:, h // 2 :, w // 2 :]
    return float(np.sum(block * block))


# ---------------------------------------------------------------------------
# Separable Gaussian blur (black-box probe smoothing).


@lru_cache(maxsize=None)
def _gaussian_taps(kernel_size: int) -> np.ndarray:
    if kernel_size < 1:
        raise ValueError("kernel_size must be >= 1")
    sigma = kernel_size / 4.0
    offsets = np.arange(kernel_size) - (kernel_size - 1) / 2.0
    taps = np.exp(-0.5 * (offsets / sigma) ** 2)
    return taps / taps.sum()


def _filter_axis(img: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    k = taps.shape[0]
    lo = (k - 1) // 2
    hi = k - 1 - lo
    pad = [(0, 0)] * img.ndim
    pad[axis] = (lo, hi)
    padded = np.pad(img, pad, mode="reflect")
    out = np.zeros_like(img)
    for i, t in enumerate(taps):
        sl = [slice(None)] * img.ndim
        sl[axis] = slice(i, i + img.shape[axis])
        out += t * padded[tuple(sl)]
    return out


def gaussian_filter2d(x, kernel_size: int):
    """Normalized separable Gaussian blur, sigma = kernel_size / 4,
    reflect padding.  Accepts (H, W) or (C, H, W)."""
    img = np.asarray(x, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise ShapeMismatch(f"expected an image, got ndim={img.ndim}")
    taps = _gaussian_taps(int(kernel_size))
    out = _filter_axis(img, taps, axis=img.ndim - 2)
    return _filter_axis(out, taps, axis=img.ndim - 1)
