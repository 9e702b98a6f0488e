"""Full-stack assembly and whole-model checkpoint tests."""

import json
import struct

import numpy as np
import pytest

from partscope.evalbench.synthdata import DataConfig, gen_dataset
from partscope.numerics import autodiff as ad
from partscope.pipeline import (
    MODEL_MAGIC,
    ForensicModel,
    StackConfig,
    detach_bundle,
    load_model,
    predictor,
    read_model_header,
    save_model,
)
from partscope.transcript import get_vocab, parse

VOCAB = get_vocab()


@pytest.fixture(scope="module")
def sample():
    ds = gen_dataset(DataConfig(train_pairs=2, level_pairs=1), master_seed=3)
    return ds.train[0]


class TestAssembly:
    def test_parameter_census_tracks_encoder_freezing(self):
        model = ForensicModel.create(seed=0, vocab=VOCAB)
        total = len(model.parameters())
        policy_only = len(model.policy.parameters())
        encoder_only = len(model.encoder_parameters())
        assert total == policy_only + encoder_only
        assert len(model.trainable_parameters()) == total
        model.train_encoders = False
        assert len(model.trainable_parameters()) == policy_only

    def test_named_parameters_are_unique_and_complete(self):
        model = ForensicModel.create(seed=0, vocab=VOCAB)
        named = model.named_parameters()
        assert len(named) == len(model.parameters())
        assert all(named[name].name == name for name in named)

    def test_bundle_gradients_reach_encoders(self, sample):
        model = ForensicModel.create(seed=0, vocab=VOCAB)
        bundle = model.bundle_for(sample.image, sample.masks)
        model.zero_grad()
        ad.sum_(bundle.e).backward()
        conv = next(p for p in model.encoder_parameters() if p.name == "spectral.conv1_w")
        assert np.abs(conv.grad_value).sum() > 0

    def test_detached_bundle_blocks_encoder_gradients(self, sample):
        model = ForensicModel.create(seed=0, vocab=VOCAB)
        bundle = detach_bundle(model.bundle_for(sample.image, sample.masks))
        model.zero_grad()
        ad.sum_(bundle.e).backward()
        assert all(np.all(p.grad_value == 0) for p in model.encoder_parameters())

    def test_frozen_bundle_matches_differentiable_values(self, sample):
        model = ForensicModel.create(seed=0, vocab=VOCAB)
        live = model.bundle_for(sample.image, sample.masks)
        frozen = model.frozen_bundle_for(sample.image, sample.masks)
        np.testing.assert_array_equal(live.e.value, frozen.e.value)
        np.testing.assert_array_equal(live.a.value, frozen.a.value)
        np.testing.assert_array_equal(live.e_g.value, frozen.e_g.value)

    def test_predictor_adapter_runs_greedy_decoding(self, sample):
        model = ForensicModel.create(seed=0, vocab=VOCAB)
        predict = predictor(model, max_len=32)
        tokens = predict(sample)
        assert tokens[0] == VOCAB.bos_id
        assert len(tokens) <= 33  # one prompt token plus the generation budget
        assert parse(tokens, VOCAB).answer in ("REAL", "FAKE", "MALFORMED")

    def test_stack_config_json_roundtrip(self):
        dims = StackConfig(height=32, width=32, c_f=4, c_p=4)
        again = StackConfig.from_json(dims.to_json())
        assert again == dims
        policy_cfg = dims.policy_config(VOCAB)
        assert policy_cfg.d_model == dims.d_model
        assert policy_cfg.evidence_dim == dims.evidence_dim
        assert policy_cfg.vocab_size == len(VOCAB)


class TestModelCheckpoints:
    def test_roundtrip_is_bit_exact(self, tmp_path, sample):
        model = ForensicModel.create(seed=5, vocab=VOCAB)
        model.train_encoders = False
        path = tmp_path / "model.pgm"
        sha = save_model(path, model, training_stage="stage1")
        loaded, header = load_model(path)
        assert header["sha256"] == sha
        assert header["training_stage"] == "stage1"
        assert header["parent_sha256"] is None
        assert loaded.train_encoders is False
        orig = model.named_parameters()
        for name, param in loaded.named_parameters().items():
            assert param.value.tobytes() == orig[name].value.tobytes(), name

    def test_roundtrip_preserves_greedy_behavior(self, tmp_path, sample):
        model = ForensicModel.create(seed=6, vocab=VOCAB)
        path = tmp_path / "model.pgm"
        save_model(path, model, training_stage="stage1")
        loaded, _ = load_model(path)
        before = predictor(model, max_len=48)(sample)
        after = predictor(loaded, max_len=48)(sample)
        assert before == after

    def test_lineage_chains_by_checkpoint_hash(self, tmp_path):
        model = ForensicModel.create(seed=0, vocab=VOCAB)
        first = tmp_path / "stage1.pgm"
        second = tmp_path / "stage2.pgm"
        sha1 = save_model(first, model, training_stage="stage1")
        sha2 = save_model(second, model, training_stage="stage2", parent_sha256=sha1)
        header = read_model_header(second)
        assert header["parent_sha256"] == sha1
        assert header["sha256"] == sha2
        assert sha1 != sha2  # stage name participates in the hash

    def test_extra_metadata_is_preserved(self, tmp_path):
        model = ForensicModel.create(seed=0, vocab=VOCAB)
        path = tmp_path / "model.pgm"
        save_model(path, model, training_stage="stage3", extra={"steps": 120})
        assert read_model_header(path)["extra"] == {"steps": 120}

    def test_bad_magic_is_rejected(self, tmp_path):
        path = tmp_path / "junk.pgm"
        path.write_bytes(b"NOTMODEL" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_model(path)
        with pytest.raises(ValueError, match="magic"):
            read_model_header(path)

    def test_vocabulary_mismatch_is_rejected(self, tmp_path):
        model = ForensicModel.create(seed=0, vocab=VOCAB)
        path = tmp_path / "model.pgm"
        save_model(path, model, training_stage="stage1")
        raw = bytearray(path.read_bytes())
        (hlen,) = struct.unpack_from("<I", raw, 8)
        header = json.loads(raw[12 : 12 + hlen].decode())
        header["vocab_fingerprint"] = "0" * len(header["vocab_fingerprint"])
        blob = json.dumps(header, sort_keys=True).encode()
        forged = MODEL_MAGIC + struct.pack("<I", len(blob)) + blob + bytes(raw[12 + hlen :])
        path.write_bytes(forged)
        with pytest.raises(ValueError, match="vocabulary"):
            load_model(path)

    def test_unknown_parameter_name_is_rejected(self, tmp_path):
        model = ForensicModel.create(seed=0, vocab=VOCAB)
        path = tmp_path / "model.pgm"
        save_model(path, model, training_stage="stage1")
        raw = bytearray(path.read_bytes())
        (hlen,) = struct.unpack_from("<I", raw, 8)
        header = json.loads(raw[12 : 12 + hlen].decode())
        header["param_names"][0] = "bogus.weight"
        blob = json.dumps(header, sort_keys=True).encode()
        forged = MODEL_MAGIC + struct.pack("<I", len(blob)) + blob + bytes(raw[12 + hlen :])
        path.write_bytes(forged)
        with pytest.raises(ValueError, match="unknown parameter"):
            load_model(path)
