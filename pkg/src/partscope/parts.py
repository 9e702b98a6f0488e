"""Part-level evidence: mask-guided pooling, embeddings, scores, aggregation.

Each of the 8 anatomical parts gets an evidence embedding e_k (shared MLP
over concatenated pooled spectral/pixel features), an anomaly score a_k
(mean of the anomaly map under the part mask), and a softmax weight w_k;
the global summary e_g is the w-weighted sum of the e_k.  Parts whose mask
is empty fall back to a learnable default vector with a_k = 0.

All outputs are autodiff Nodes so gradients reach the encoders and the
embedding MLP; read `.value` for plain arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .numerics import autodiff as ad
from .numerics.tensor import as_tensor, load_tensor, save_tensor


class PartId(IntEnum):
    LEFT_EYE = 0
    RIGHT_EYE = 1
    LEFT_EYEBROW = 2
    RIGHT_EYEBROW = 3
    NOSE = 4
    MOUTH = 5
    FACE_CONTOUR = 6
    HAIR = 7


NUM_PARTS = len(PartId)

_MASK_MANIFEST = "masks.json"


@dataclass
class PartMaskSet:
    """Binary masks for all 8 parts over one image grid, shape (8, H, W)."""

    masks: np.ndarray

    def __post_init__(self):
        self.masks = as_tensor(self.masks)
        if self.masks.ndim != 3 or self.masks.shape[0] != NUM_PARTS:
            raise ValueError(f"expected ({NUM_PARTS}, H, W) masks, got {self.masks.shape}")
        bad = ~np.isin(self.masks, (0.0, 1.0))
        if bad.any():
            raise ValueError("mask values must be exactly 0 or 1")

    @property
    def counts(self) -> np.ndarray:
        return self.masks.sum(axis=(1, 2))

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0

    def mask_for(self, part: PartId) -> np.ndarray:
        return self.masks[int(part)]

    def save(self, directory: str | Path) -> None:
        """One portable-tensor file per present part plus a JSON manifest."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        present = [p for p in PartId if self.present[int(p)]]
        for p in present:
            save_tensor(directory / f"mask_{p.name}.pgt", self.masks[int(p)])
        manifest = {
            "parts": [p.name for p in present],
            "height": int(self.masks.shape[1]),
            "width": int(self.masks.shape[2]),
        }
        (directory / _MASK_MANIFEST).write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, directory: str | Path) -> "PartMaskSet":
        directory = Path(directory)
        manifest = json.loads((directory / _MASK_MANIFEST).read_text())
        h, w = manifest["height"], manifest["width"]
        masks = np.zeros((NUM_PARTS, h, w))
        for name in manifest["parts"]:
            part = PartId[name]
            masks[int(part)] = load_tensor(directory / f"mask_{part.name}.pgt")
        return cls(masks)


@dataclass
class PartMlp:
    """The shared part-embedding projector: linear -> tanh -> linear.

    With `w2 is None` it degenerates to a single linear layer, which the
    tests use for closed-form checks (identity weights reproduce the
    concatenated input).  `default_vector` is the learnable stand-in for
    parts with no pixels, zero-initialized.
    """

    w1: ad.Parameter
    b1: ad.Parameter
    w2: ad.Parameter | None
    b2: ad.Parameter | None
    default_vector: ad.Parameter

    @classmethod
    def create(cls, c_in: int, d: int, hidden: int | None = 32, seed: int = 0) -> "PartMlp":
        rng = np.random.default_rng(seed)
        if hidden is None:
            w1 = ad.Parameter("part_mlp.w1", rng.normal(size=(c_in, d)) / np.sqrt(c_in))
            b1 = ad.Parameter("part_mlp.b1", np.zeros(d))
            w2 = b2 = None
        else:
            w1 = ad.Parameter("part_mlp.w1", rng.normal(size=(c_in, hidden)) / np.sqrt(c_in))
            b1 = ad.Parameter("part_mlp.b1", np.zeros(hidden))
            w2 = ad.Parameter("part_mlp.w2", rng.normal(size=(hidden, d)) / np.sqrt(hidden))
            b2 = ad.Parameter("part_mlp.b2", np.zeros(d))
        default = ad.Parameter("part_mlp.default_vector", np.zeros(d))
        return cls(w1, b1, w2, b2, default)

    @classmethod
    def identity(cls, c_in: int) -> "PartMlp":
        """Single linear layer with identity weights; output == input."""
        w1 = ad.Parameter("part_mlp.w1", np.eye(c_in))
        b1 = ad.Parameter("part_mlp.b1", np.zeros(c_in))
        default = ad.Parameter("part_mlp.default_vector", np.zeros(c_in))
        return cls(w1, b1, None, None, default)

    @property
    def out_dim(self) -> int:
        w_last = self.w1 if self.w2 is None else self.w2
        return w_last.value.shape[1]

    def parameters(self) -> list[ad.Parameter]:
        ps = [self.w1, self.b1]
        if self.w2 is not None:
            ps += [self.w2, self.b2]
        ps.append(self.default_vector)
        return ps

    def apply(self, x: ad.Node) -> ad.Node:
        """x: (c_in,) -> (d,)."""
        h = ad.matmul(ad.reshape(x, (1, -1)), self.w1) + self.b1
        if self.w2 is not None:
            h = ad.matmul(ad.tanh(h), self.w2) + self.b2
        return ad.reshape(h, (self.out_dim,))


@dataclass
class EvidenceBundle:
    """Per-image part evidence: Eq.-style embeddings, scores, weights, summary.

    e: (8, D) embeddings; a: (8,) anomaly scores in [0,1]; w: (8,) softmax
    weights; e_g: (D,) global summary; present: (8,) bools (mask nonempty).
    All but `present` are Nodes.
    """

    e: ad.Node
    a: ad.Node
    w: ad.Node
    e_g: ad.Node
    present: np.ndarray


def masked_avg_pool(fmap, mask) -> ad.Node | None:
    """Per-channel mean of fmap (C, H, W) over mask==1 pixels; None if empty.

    The mask is a constant; gradients flow into fmap only.
    """
    mask = np.asarray(mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        return None
    fmap = ad.as_node(fmap)
    if fmap.value.shape[-2:] != mask.shape:
        raise ValueError(f"fmap spatial {fmap.value.shape[-2:]} != mask {mask.shape}")
    return ad.sum_(fmap * mask[None, :, :], axis=(1, 2)) * (1.0 / count)


def part_score(anomaly, mask) -> ad.Node:
    """Mean anomaly over mask pixels; exactly 0 for an empty mask."""
    mask = np.asarray(mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        return ad.constant(0.0)
    anomaly = ad.as_node(anomaly)
    return ad.sum_(anomaly * mask) * (1.0 / count)


def embed_part(freq_pooled: ad.Node, pixel_pooled: ad.Node, mlp: PartMlp) -> ad.Node:
    """Eq.-1 style part embedding: MLP of the concatenated pooled features."""
    joint = ad.concat([ad.as_node(freq_pooled), ad.as_node(pixel_pooled)], axis=0)
    return mlp.apply(joint)


def aggregate_global(e: ad.Node, a: ad.Node) -> tuple[ad.Node, ad.Node]:
    """Eq.-2 style aggregation: w = softmax(a), e_g = sum_k w_k e_k."""
    w = ad.softmax(a, axis=-1)
    e_g = ad.sum_(e * ad.reshape(w, (NUM_PARTS, 1)), axis=0)
    return w, e_g


def build_bundle(masks: PartMaskSet, spectral, pixel, mlp: PartMlp) -> EvidenceBundle:
    """Pool -> embed -> score per part, then aggregate.

    spectral: SpectralFeatures (fmap (C_f,H,W), anomaly (H,W)); pixel:
    PixelFeatures (fmap (C_p,H,W)).  Absent parts contribute the learnable
    default vector with a_k = 0.
    """
    e_list, a_list = [], []
    for part in PartId:
        mask = masks.mask_for(part)
        freq_pooled = masked_avg_pool(spectral.fmap, mask)
        if freq_pooled is None:
            e_list.append(ad.as_node(mlp.default_vector))
            a_list.append(ad.constant(0.0))
            continue
        pixel_pooled = masked_avg_pool(pixel.fmap, mask)
        e_list.append(embed_part(freq_pooled, pixel_pooled, mlp))
        a_list.append(part_score(spectral.anomaly, mask))
    e = ad.stack(e_list, axis=0)
    a = ad.stack(a_list, axis=0)
    w, e_g = aggregate_global(e, a)
    return EvidenceBundle(e=e, a=a, w=w, e_g=e_g, present=masks.present.copy())
