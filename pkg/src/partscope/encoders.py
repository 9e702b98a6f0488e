"""Forensic signal encoders: the spectral branch and the pixel branch.

The spectral branch takes the 2-D FFT of the (luma) image, applies a bank
of radial high-pass filters, inverts each band back to the pixel domain,
and runs the stacked band responses through a small conv backbone to get
frequency feature maps plus a per-pixel anomaly map squashed into [0,1].
The pixel branch is a plain 3-layer conv stack standing in for a large
pre-trained extractor; a file-backed loader lets precomputed features be
dropped in instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import autodiff as ad
from .numerics.fft import fft2_complex, ifft2_complex
from .numerics.tensor import as_tensor, load_tensor

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

DEFAULT_CUTOFFS = (0.25, 0.5, 0.75)


@dataclass(frozen=True)
class FilterBank:
    """Binary radial high-pass masks over the (H, W) spectrum grid.

    Frequencies are measured as a fraction of the Nyquist radius: bin
    (u, v) has radius sqrt(fu^2 + fv^2) with fu = min(u, H-u)/(H/2), so a
    cutoff r keeps exactly the bins strictly beyond r.  Lower cutoffs give
    supersets of higher ones, and the DC bin is zero in every filter.
    """

    cutoffs: tuple[float, ...]
    masks: np.ndarray  # (len(cutoffs), H, W) of {0,1}

    def __len__(self) -> int:
        return len(self.cutoffs)


def radial_frequency(h: int, w: int) -> np.ndarray:
    """Per-bin frequency radius in Nyquist units (DC=0, axis Nyquist=1)."""
    u = np.arange(h)
    v = np.arange(w)
    fu = np.minimum(u, h - u) / (h / 2)
    fv = np.minimum(v, w - v) / (w / 2)
    return np.sqrt(fu[:, None] ** 2 + fv[None, :] ** 2)


def make_filter_bank(h: int, w: int, cutoffs=DEFAULT_CUTOFFS) -> FilterBank:
    cutoffs = tuple(float(c) for c in cutoffs)
    for c in cutoffs:
        if not 0.0 < c < 1.0:
            raise ValueError(f"cutoff {c} outside (0, 1)")
    rho = radial_frequency(h, w)
    masks = np.stack([(rho > c).astype(np.float64) for c in cutoffs])
    return FilterBank(cutoffs=cutoffs, masks=masks)


def to_luma(image: np.ndarray) -> np.ndarray:
    """(H, W) passes through; (3, H, W) becomes a weighted luma plane."""
    image = as_tensor(image)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[0] == 3:
        return np.tensordot(LUMA_WEIGHTS, image, axes=(0, 0))
    raise ValueError(f"expected (H, W) or (3, H, W) image, got {image.shape}")


def band_responses(image: np.ndarray, bank: FilterBank) -> np.ndarray:
    """Per-filter band-passed spatial responses, shape (B, H, W).

    Pure signal processing, no parameters; gradients are not tracked
    through the FFT (the image is not trainable).
    """
    luma = to_luma(image)
    if luma.shape != bank.masks.shape[1:]:
        raise ValueError(f"image {luma.shape} does not match bank {bank.masks.shape[1:]}")
    spectrum = fft2_complex(luma)
    out = np.empty((len(bank),) + luma.shape)
    for i in range(len(bank)):
        out[i] = ifft2_complex(spectrum * bank.masks[i]).real
    return out


def band_energies(image: np.ndarray, bank: FilterBank) -> np.ndarray:
    """Total energy per band response; monotone non-increasing in cutoff."""
    resp = band_responses(image, bank)
    return (resp**2).sum(axis=(1, 2))


@dataclass
class SpectralFeatures:
    fmap: ad.Node  # (C_f, H, W)
    anomaly: ad.Node  # (H, W), values in [0, 1]


@dataclass
class PixelFeatures:
    fmap: ad.Node  # (C_p, H, W)


@dataclass
class SpectralParams:
    """2-layer conv backbone over band responses + anomaly head.

    The backbone's input is the band responses stacked with one extra
    parameter-free channel: how far the local band energy deviates from
    the image's own mean level, relatively.  That contrast-normalized
    channel makes the feature maps informative before any training.  The
    anomaly logit is a zero-initialized 1x1 conv over the feature maps
    plus a learnable scale on the same deviation signal, so the map is
    useful from the start and both kinds of tampering read anomalous —
    energy excess (planted noise, seams) and energy deficit (smoothed
    patches).
    """

    conv1_w: ad.Parameter
    conv1_b: ad.Parameter
    conv2_w: ad.Parameter
    conv2_b: ad.Parameter
    head_w: ad.Parameter
    head_b: ad.Parameter
    energy_scale: ad.Parameter

    @classmethod
    def create(cls, bands: int = len(DEFAULT_CUTOFFS), c_f: int = 8, seed: int = 0) -> "SpectralParams":
        rng = np.random.default_rng(seed)

        def w(name, shape):
            fan_in = int(np.prod(shape[1:]))
            return ad.Parameter(name, rng.normal(size=shape) / np.sqrt(fan_in))

        return cls(
            conv1_w=w("spectral.conv1_w", (c_f, bands + 1, 3, 3)),
            conv1_b=ad.Parameter("spectral.conv1_b", np.zeros(c_f)),
            conv2_w=w("spectral.conv2_w", (c_f, c_f, 3, 3)),
            conv2_b=ad.Parameter("spectral.conv2_b", np.zeros(c_f)),
            head_w=ad.Parameter("spectral.head_w", np.zeros((1, c_f, 1, 1))),
            head_b=ad.Parameter("spectral.head_b", np.zeros(1)),
            energy_scale=ad.Parameter("spectral.energy_scale", 1.0),
        )

    def parameters(self) -> list[ad.Parameter]:
        return [
            self.conv1_w, self.conv1_b,
            self.conv2_w, self.conv2_b,
            self.head_w, self.head_b, self.energy_scale,
        ]


def encode_spectral(image: np.ndarray, bank: FilterBank, params: SpectralParams) -> SpectralFeatures:
    resp = band_responses(image, bank)
    local_energy = (resp**2).mean(axis=0)  # (H, W), parameter-free
    deviation = np.abs(local_energy - local_energy.mean()) / (local_energy.mean() + 1e-8)
    # Rectifying activations matter here: band responses are zero-mean
    # oscillations, so artifact strength lives in their local variance.
    # relu turns that variance into a positive feature mean that survives
    # the masked average pooling downstream; an odd activation would not.
    x = ad.constant(np.concatenate([resp, deviation[None]], axis=0)[None])  # (1, B+1, H, W)
    h1 = ad.relu(ad.conv2d(x, params.conv1_w, params.conv1_b))
    h2 = ad.relu(ad.conv2d(h1, params.conv2_w, params.conv2_b))
    hw = resp.shape[1:]
    head = ad.reshape(ad.conv2d(h2, params.head_w, params.head_b), hw)
    logit = head + params.energy_scale * ad.constant(deviation)
    return SpectralFeatures(
        fmap=ad.reshape(h2, (params.conv2_w.value.shape[0],) + hw),
        anomaly=ad.sigmoid(logit),
    )


@dataclass
class PixelParams:
    """3-layer stride-1 conv stack, input (1 or 3) channels -> C_p maps."""

    conv1_w: ad.Parameter
    conv1_b: ad.Parameter
    conv2_w: ad.Parameter
    conv2_b: ad.Parameter
    conv3_w: ad.Parameter
    conv3_b: ad.Parameter

    @classmethod
    def create(cls, in_channels: int = 1, c_p: int = 8, seed: int = 1) -> "PixelParams":
        rng = np.random.default_rng(seed)

        def w(name, shape):
            fan_in = int(np.prod(shape[1:]))
            return ad.Parameter(name, rng.normal(size=shape) / np.sqrt(fan_in))

        mid = max(c_p // 2, 4)
        return cls(
            conv1_w=w("pixel.conv1_w", (mid, in_channels, 3, 3)),
            conv1_b=ad.Parameter("pixel.conv1_b", np.zeros(mid)),
            conv2_w=w("pixel.conv2_w", (mid, mid, 3, 3)),
            conv2_b=ad.Parameter("pixel.conv2_b", np.zeros(mid)),
            conv3_w=w("pixel.conv3_w", (c_p, mid, 3, 3)),
            conv3_b=ad.Parameter("pixel.conv3_b", np.zeros(c_p)),
        )

    def parameters(self) -> list[ad.Parameter]:
        return [
            self.conv1_w, self.conv1_b,
            self.conv2_w, self.conv2_b,
            self.conv3_w, self.conv3_b,
        ]


def encode_pixel(image: np.ndarray, params: PixelParams) -> PixelFeatures:
    image = as_tensor(image)
    if image.ndim == 2:
        image = image[None]
    in_ch = params.conv1_w.value.shape[1]
    if image.shape[0] != in_ch:
        raise ValueError(f"pixel branch expects {in_ch} channel(s), got {image.shape[0]}")
    x = ad.constant(image[None])  # (1, C, H, W)
    h1 = ad.relu(ad.conv2d(x, params.conv1_w, params.conv1_b))
    h2 = ad.relu(ad.conv2d(h1, params.conv2_w, params.conv2_b))
    h3 = ad.relu(ad.conv2d(h2, params.conv3_w, params.conv3_b))
    c_p = params.conv3_w.value.shape[0]
    return PixelFeatures(fmap=ad.reshape(h3, (c_p,) + image.shape[1:]))


def load_pixel_features(path: str | Path) -> PixelFeatures:
    """File-backed pixel branch: a precomputed (C_p, H, W) portable tensor."""
    arr = load_tensor(path)
    if arr.ndim != 3:
        raise ValueError(f"precomputed features must be (C, H, W), got {arr.shape}")
    return PixelFeatures(fmap=ad.constant(arr))
