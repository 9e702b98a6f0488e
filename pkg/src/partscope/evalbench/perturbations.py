"""Deterministic image degradations used for robustness checks.

Two degradations are supported, both implemented from first principles so
their numerical behaviour is fully pinned down by tests:

* blockwise DCT quantization ("jpeg"): the image is split into 8x8 blocks,
  each block is transformed with an orthonormal DCT-II, divided by a
  quality-scaled luminance quantization table, rounded, and reconstructed.
  No entropy coding is performed -- only the lossy stage matters here.
* separable Gaussian blur ("blur"): convolution with a normalized 1-D
  Gaussian kernel applied along each spatial axis with reflected borders.

All operations are pure functions of their inputs; repeated runs produce
bit-identical outputs.
"""

from __future__ import annotations

import math

import numpy as np

BLOCK = 8

# Baseline luminance quantization table (quality 50).
LUMINANCE_QUANT_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

STANDARD_QUALITY_FACTORS = (90, 70, 60)
STANDARD_BLUR_SIGMAS = (1.0, 2.0, 4.0)

PERTURB_KINDS = ("jpeg", "blur")


def dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal DCT-II matrix M with M @ M.T == I.

    Row k holds c_k * cos(pi * (2i + 1) * k / (2n)) where c_0 = sqrt(1/n)
    and c_k = sqrt(2/n) for k > 0.
    """
    i = np.arange(n, dtype=np.float64)
    k = i[:, None]
    mat = np.cos(np.pi * (2.0 * i[None, :] + 1.0) * k / (2.0 * n))
    mat *= np.sqrt(2.0 / n)
    mat[0, :] = np.sqrt(1.0 / n)
    return mat


def quality_scale(quality: int) -> float:
    """Scaling percentage for a quality factor in [1, 100]."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality factor must be in [1, 100], got {quality}")
    if quality < 50:
        return 5000.0 / quality
    return 200.0 - 2.0 * quality


def scaled_quant_table(quality: int) -> np.ndarray:
    """Quality-scaled quantization table, entries clipped to [1, 255]."""
    scale = quality_scale(quality)
    table = np.floor((LUMINANCE_QUANT_TABLE * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


def _blockify(channel: np.ndarray) -> np.ndarray:
    """(H, W) -> (H/8, W/8, 8, 8) view-copy; H and W must be multiples of 8."""
    h, w = channel.shape
    blocks = channel.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK)
    return blocks.transpose(0, 2, 1, 3)


def _unblockify(blocks: np.ndarray) -> np.ndarray:
    nbh, nbw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(nbh * BLOCK, nbw * BLOCK)


def _pad_reflect(arr: np.ndarray, pad: int, axis: int) -> np.ndarray:
    """Reflect-pad along one axis, looping when pad exceeds the axis length."""
    while pad > 0:
        step = min(pad, arr.shape[axis] - 1)
        if step <= 0:
            raise ValueError("cannot reflect-pad an axis of length 1")
        width = [(0, 0)] * arr.ndim
        width[axis] = (step, step)
        arr = np.pad(arr, width, mode="reflect")
        pad -= step
    return arr


def jpeg_compress(image: np.ndarray, quality: int) -> np.ndarray:
    """Blockwise DCT quantization of an image in [0, 1].

    Accepts (H, W) or (C, H, W) arrays.  Images whose sides are not
    multiples of 8 are reflect-padded, compressed, and cropped back.
    Raises ValueError for images smaller than one block.
    """
    table = scaled_quant_table(quality)
    mat = dct_matrix()
    arr = np.asarray(image, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (H, W) or (C, H, W), got shape {arr.shape}")
    _, h, w = arr.shape
    if h < BLOCK or w < BLOCK:
        raise ValueError(f"image {h}x{w} is smaller than one {BLOCK}x{BLOCK} block")
    pad_h = (-h) % BLOCK
    pad_w = (-w) % BLOCK
    if pad_h or pad_w:
        arr = np.pad(arr, ((0, 0), (0, pad_h), (0, pad_w)), mode="reflect")
    out = np.empty_like(arr)
    for c in range(arr.shape[0]):
        centered = arr[c] * 255.0 - 128.0
        blocks = _blockify(centered)
        coeffs = np.einsum("ij,abjk,lk->abil", mat, blocks, mat)
        quantized = np.round(coeffs / table) * table
        recon = np.einsum("ji,abjk,kl->abil", mat, quantized, mat)
        out[c] = (_unblockify(recon) + 128.0) / 255.0
    out = out[:, :h, :w]
    out = np.clip(out, 0.0, 1.0)
    return out[0] if squeeze else out


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian kernel with radius ceil(3 * sigma)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def _convolve_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = (kernel.size - 1) // 2
    padded = _pad_reflect(arr, radius, axis)
    out = np.zeros_like(arr)
    for t, weight in enumerate(kernel):
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(t, t + arr.shape[axis])
        out += weight * padded[tuple(sl)]
    return out


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of an (H, W) or (C, H, W) image."""
    kernel = gaussian_kernel(sigma)
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ValueError(f"expected (H, W) or (C, H, W), got shape {arr.shape}")
    out = _convolve_axis(arr, kernel, axis=arr.ndim - 2)
    return _convolve_axis(out, kernel, axis=arr.ndim - 1)


def perturb(image: np.ndarray, kind: str, value: float) -> np.ndarray:
    """Apply a named degradation: ("jpeg", quality) or ("blur", sigma)."""
    if kind == "jpeg":
        quality = int(value)
        if quality != value:
            raise ValueError(f"jpeg quality must be an integer, got {value}")
        return jpeg_compress(image, quality)
    if kind == "blur":
        return gaussian_blur(image, float(value))
    raise ValueError(f"unknown perturbation kind {kind!r}; expected one of {PERTURB_KINDS}")
