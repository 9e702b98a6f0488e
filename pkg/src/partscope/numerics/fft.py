"""2-D discrete Fourier transform.

Unnormalized forward DFT with DC at index (0, 0), matching the usual
convention: X[u,v] = sum_xy x[x,y] * exp(-2*pi*i*(ux/H + vy/W)).

The 1-D kernel is an iterative radix-2 Cooley-Tukey transform, vectorized
over leading axes; non-power-of-two lengths go through Bluestein's
chirp-z algorithm on a padded power-of-two transform.  Correctness is the
bar here, not throughput.

Public entry points exchange spectra as real float64 arrays of shape
(H, W, 2) with the last axis holding (real, imag); internal helpers work
on complex128.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def _fft_pow2(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Radix-2 FFT along the last axis; length must be a power of two."""
    n = a.shape[-1]
    if n == 1:
        return a.copy()
    a = a[..., _bit_reverse_indices(n)]
    sign = 2j if inverse else -2j
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * np.pi * np.arange(half) / size)
        a = a.reshape(a.shape[:-1] + (n // size, size))
        even = a[..., :half]
        odd = a[..., half:] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1)
        a = a.reshape(a.shape[:-2] + (n,))
        size *= 2
    return a


def _fft_bluestein(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Chirp-z transform for arbitrary lengths via a power-of-two FFT."""
    n = a.shape[-1]
    sign = 1j if inverse else -1j
    k = np.arange(n)
    chirp = np.exp(sign * np.pi * (k * k % (2 * n)) / n)
    m = 1 << (2 * n - 1).bit_length()
    fa = np.zeros(a.shape[:-1] + (m,), dtype=np.complex128)
    fa[..., :n] = a * chirp
    fb = np.zeros(m, dtype=np.complex128)
    fb[:n] = np.conj(chirp)
    fb[m - n + 1 :] = np.conj(chirp[1:][::-1])
    conv = _fft_pow2(_fft_pow2(fa, False) * _fft_pow2(fb, False), True) / m
    return conv[..., :n] * chirp


def _fft1d(a: np.ndarray, inverse: bool = False) -> np.ndarray:
    a = np.asarray(a, dtype=np.complex128)
    n = a.shape[-1]
    if n & (n - 1) == 0:
        return _fft_pow2(a, inverse)
    return _fft_bluestein(a, inverse)


def fft2_complex(image: np.ndarray) -> np.ndarray:
    """Forward 2-D DFT, complex in and out; transforms the last two axes."""
    a = np.asarray(image, dtype=np.complex128)
    a = _fft1d(a)
    a = np.swapaxes(_fft1d(np.swapaxes(a, -1, -2)), -1, -2)
    return a


def ifft2_complex(spectrum: np.ndarray) -> np.ndarray:
    """Inverse 2-D DFT with 1/(H*W) normalization."""
    a = np.asarray(spectrum, dtype=np.complex128)
    h, w = a.shape[-2], a.shape[-1]
    a = _fft1d(a, inverse=True)
    a = np.swapaxes(_fft1d(np.swapaxes(a, -1, -2), inverse=True), -1, -2)
    return a / (h * w)


def pack_spectrum(spec: np.ndarray) -> Tensor:
    return np.stack([spec.real, spec.imag], axis=-1)


def unpack_spectrum(packed: np.ndarray) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.float64)
    if packed.ndim != 3 or packed.shape[-1] != 2:
        raise ValueError(f"expected (H, W, 2) packed spectrum, got {packed.shape}")
    return packed[..., 0] + 1j * packed[..., 1]


def fft2d(image: Tensor) -> Tensor:
    """Forward DFT of a 2-D real image; returns (H, W, 2) real/imag pairs."""
    image = as_tensor(image)
    if image.ndim != 2:
        raise ValueError(f"fft2d expects a 2-D image, got shape {image.shape}")
    if image.shape[0] < 2 or image.shape[1] < 2:
        raise ValueError(f"fft2d needs H, W >= 2, got {image.shape}")
    return pack_spectrum(fft2_complex(image))


def ifft2d(spectrum: Tensor) -> Tensor:
    """Inverse of fft2d; returns the real part of the reconstruction."""
    return ifft2_complex(unpack_spectrum(spectrum)).real
