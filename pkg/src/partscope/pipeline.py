"""Whole-stack assembly: forensic encoders -> part evidence -> policy.

`ForensicModel` owns every trainable parameter across the two encoder
branches, the shared part-embedding MLP, and the transformer policy.  It
builds the per-image evidence bundle the policy consumes, runs greedy
prediction for evaluation, and checkpoints the whole stack into one file
whose header records a lineage hash of the checkpoint it grew from.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoders import (
    DEFAULT_CUTOFFS,
    FilterBank,
    PixelFeatures,
    PixelParams,
    SpectralFeatures,
    SpectralParams,
    encode_pixel,
    encode_spectral,
    make_filter_bank,
)
from .numerics import autodiff as ad
from .numerics.tensor import tensor_bytes, tensor_from_bytes
from .parts import EvidenceBundle, PartMaskSet, PartMlp, build_bundle
from .reasoner import (
    FULL_INJECTION,
    GenerationResult,
    InjectionMode,
    ModelConfig,
    PolicyParams,
    generate,
)
from .transcript import Vocab, get_vocab

MODEL_MAGIC = b"PGRMODL1"


@dataclass(frozen=True)
class StackConfig:
    """Dimensions of the full stack (image grid, encoders, policy)."""

    height: int = 64
    width: int = 64
    cutoffs: tuple[float, ...] = DEFAULT_CUTOFFS
    c_f: int = 8
    c_p: int = 8
    mlp_hidden: int = 32
    evidence_dim: int = 32
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    context: int = 512
    use_spectral: bool = True  # branch ablations: a disabled branch
    use_pixel: bool = True  # contributes zeros instead of features

    def policy_config(self, vocab: Vocab) -> ModelConfig:
        return ModelConfig(
            vocab_size=len(vocab),
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            context=self.context,
            evidence_dim=self.evidence_dim,
        )

    def to_json(self) -> dict:
        row = dataclasses.asdict(self)
        row["cutoffs"] = list(self.cutoffs)
        return row

    @classmethod
    def from_json(cls, row: dict) -> "StackConfig":
        row = dict(row)
        row["cutoffs"] = tuple(row["cutoffs"])
        return cls(**row)


@dataclass
class ForensicModel:
    """Encoders, part-evidence head, and policy, as one trainable unit."""

    dims: StackConfig
    bank: FilterBank
    spectral: SpectralParams
    pixel: PixelParams
    mlp: PartMlp
    policy: PolicyParams
    train_encoders: bool = True

    @classmethod
    def create(cls, dims: StackConfig | None = None, seed: int = 0,
               vocab: Vocab | None = None) -> "ForensicModel":
        dims = dims or StackConfig()
        vocab = vocab or get_vocab()
        return cls(
            dims=dims,
            bank=make_filter_bank(dims.height, dims.width, dims.cutoffs),
            spectral=SpectralParams.create(bands=len(dims.cutoffs), c_f=dims.c_f, seed=seed + 1),
            pixel=PixelParams.create(in_channels=3, c_p=dims.c_p, seed=seed + 2),
            mlp=PartMlp.create(c_in=dims.c_f + dims.c_p, d=dims.evidence_dim,
                               hidden=dims.mlp_hidden, seed=seed + 3),
            policy=PolicyParams.create(dims.policy_config(vocab), seed=seed, vocab=vocab),
        )

    # -- parameter plumbing ------------------------------------------------

    def encoder_parameters(self) -> list[ad.Parameter]:
        return self.spectral.parameters() + self.pixel.parameters() + self.mlp.parameters()

    def parameters(self) -> list[ad.Parameter]:
        return self.policy.parameters() + self.encoder_parameters()

    def trainable_parameters(self) -> list[ad.Parameter]:
        ps = self.policy.parameters()
        if self.train_encoders:
            ps = ps + self.encoder_parameters()
        return ps

    def named_parameters(self) -> dict[str, ad.Parameter]:
        named = {p.name: p for p in self.parameters()}
        if len(named) != len(self.parameters()):
            raise ValueError("parameter names must be unique across the stack")
        return named

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- evidence ----------------------------------------------------------

    def bundle_for(self, image: np.ndarray, masks: PartMaskSet) -> EvidenceBundle:
        """Differentiable evidence bundle for one (3, H, W) image."""
        spectral = encode_spectral(image, self.bank, self.spectral)
        if not self.dims.use_spectral:
            spectral = SpectralFeatures(fmap=spectral.fmap * 0.0,
                                        anomaly=spectral.anomaly * 0.0)
        pixel = encode_pixel(image, self.pixel)
        if not self.dims.use_pixel:
            pixel = PixelFeatures(fmap=pixel.fmap * 0.0)
        return build_bundle(masks, spectral, pixel, self.mlp)

    def frozen_bundle_for(self, image: np.ndarray, masks: PartMaskSet) -> EvidenceBundle:
        """Evidence bundle with the encoder graph detached (constants)."""
        with ad.no_grad():
            bundle = self.bundle_for(image, masks)
        return detach_bundle(bundle)

    # -- prediction ----------------------------------------------------------

    def predict(self, image: np.ndarray, masks: PartMaskSet, *,
                max_len: int = 96, mode: InjectionMode = FULL_INJECTION,
                vocab: Vocab | None = None) -> GenerationResult:
        """Greedy transcript for one image."""
        vocab = vocab or get_vocab()
        bundle = self.frozen_bundle_for(image, masks)
        return generate([vocab.bos_id], bundle, self.policy, greedy=True,
                        max_len=max_len, mode=mode, vocab=vocab)


def detach_bundle(bundle: EvidenceBundle) -> EvidenceBundle:
    """Re-wrap bundle tensors as constants (no gradient into the encoders)."""
    return EvidenceBundle(
        e=ad.constant(bundle.e.value.copy()),
        a=ad.constant(bundle.a.value.copy()),
        w=ad.constant(bundle.w.value.copy()),
        e_g=ad.constant(bundle.e_g.value.copy()),
        present=bundle.present.copy(),
    )


def predictor(model: ForensicModel, *, max_len: int = 96,
              mode: InjectionMode = FULL_INJECTION,
              vocab: Vocab | None = None):
    """Adapter for the evaluation harness: sample -> generated token tuple."""
    vocab = vocab or get_vocab()

    def predict(sample) -> tuple[int, ...]:
        result = model.predict(sample.image, sample.masks,
                               max_len=max_len, mode=mode, vocab=vocab)
        return result.tokens

    return predict


# ---------------------------------------------------------------------------
# Whole-stack checkpoints (policy + encoders + part MLP in one file)


def save_model(path: str | Path, model: ForensicModel, training_stage: str,
               parent_sha256: str | None = None, extra: dict | None = None) -> str:
    """Write one file holding every parameter; returns its sha256."""
    named = model.named_parameters()
    names = sorted(named)
    header = {
        "format": 1,
        "dims": model.dims.to_json(),
        "vocab_fingerprint": model.policy.vocab_fingerprint,
        "training_stage": training_stage,
        "parent_sha256": parent_sha256,
        "train_encoders": model.train_encoders,
        "param_names": names,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    out = bytearray()
    out += MODEL_MAGIC
    out += struct.pack("<I", len(blob))
    out += blob
    for name in names:
        out += tensor_bytes(named[name].value)
    Path(path).write_bytes(bytes(out))
    return hashlib.sha256(bytes(out)).hexdigest()


def read_model_header(path: str | Path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:8] != MODEL_MAGIC:
        raise ValueError("bad model checkpoint magic")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12 : 12 + hlen].decode())
    header["sha256"] = hashlib.sha256(raw).hexdigest()
    return header


def load_model(path: str | Path, vocab: Vocab | None = None) -> tuple[ForensicModel, dict]:
    """Rebuild the full stack from a checkpoint; header gains its sha256."""
    vocab = vocab or get_vocab()
    raw = Path(path).read_bytes()
    if raw[:8] != MODEL_MAGIC:
        raise ValueError("bad model checkpoint magic")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12 : 12 + hlen].decode())
    if header["vocab_fingerprint"] != vocab.fingerprint():
        raise ValueError("checkpoint was written against a different vocabulary")
    dims = StackConfig.from_json(header["dims"])
    model = ForensicModel.create(dims, seed=0, vocab=vocab)
    model.train_encoders = header.get("train_encoders", True)
    named = model.named_parameters()
    offset = 12 + hlen
    for name in header["param_names"]:
        arr, offset = tensor_from_bytes(raw, offset)
        if name not in named:
            raise ValueError(f"unknown parameter in checkpoint: {name}")
        if arr.shape != named[name].value.shape:
            raise ValueError(
                f"shape mismatch for {name}: {arr.shape} vs {named[name].value.shape}")
        named[name].value = arr
    header["sha256"] = hashlib.sha256(raw).hexdigest()
    return model, header
