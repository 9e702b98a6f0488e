"""Run-configuration loading, precedence, and validation."""

import json

import pytest

from partscope.config import RunConfig, resolve_config, write_resolved


def test_roundtrip_through_json_is_lossless():
    cfg = RunConfig()
    again = RunConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert again == cfg


def test_unknown_top_level_key_rejected():
    with pytest.raises(ValueError, match="masterr_seed"):
        RunConfig.from_json({"masterr_seed": 1})


@pytest.mark.parametrize("section", ["data", "stack", "weights", "grpo"])
def test_unknown_nested_key_rejected(section):
    with pytest.raises(ValueError, match=section):
        RunConfig.from_json({section: {"bogus_key": 1}})


def test_override_with_dotted_keys():
    cfg = RunConfig()
    out = cfg.override(**{"grpo.lr": 1e-4, "sft_epochs": 5, "stack.use_pixel": False})
    assert out.grpo.lr == 1e-4
    assert out.sft_epochs == 5
    assert out.stack.use_pixel is False
    # the original is untouched
    assert cfg.grpo.lr != 1e-4 and cfg.stack.use_pixel is True


def test_override_skips_none_values():
    cfg = RunConfig()
    assert cfg.override(**{"grpo.lr": None, "sft_epochs": None}) == cfg


def test_override_rejects_unknown_names():
    with pytest.raises(ValueError, match="nonsense"):
        RunConfig().override(nonsense=3)
    with pytest.raises(ValueError, match="grpo"):
        RunConfig().override(**{"grpo.nope": 1})


def test_resolve_precedence_flags_beat_file_beat_defaults(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"master_seed": 9, "sft_lr": 1e-3, "grpo": {"lr": 5e-5}}))
    cfg = resolve_config(str(path), sft_lr=2e-3)
    assert cfg.master_seed == 9          # from file
    assert cfg.sft_lr == 2e-3            # flag beats file
    assert cfg.grpo.lr == 5e-5           # nested section from file
    assert cfg.sft_epochs == RunConfig().sft_epochs  # untouched default


def test_resolve_without_file_uses_defaults():
    assert resolve_config(None) == RunConfig()


def test_write_resolved_roundtrips(tmp_path):
    cfg = RunConfig().override(master_seed=3)
    out = write_resolved(cfg, tmp_path)
    assert out.name == "resolved_config.json"
    assert RunConfig.from_json(json.loads(out.read_text())) == cfg
    assert out.read_text().endswith("\n")


def test_validation_rejects_bad_values():
    with pytest.raises(ValueError):
        RunConfig(n_clients=1)
    with pytest.raises(ValueError):
        RunConfig(sft_epochs=0)
    with pytest.raises(ValueError):
        RunConfig(grpo_steps=0)


def test_missing_file_raises():
    with pytest.raises(FileNotFoundError):
        resolve_config("/nonexistent/cfg.json")
