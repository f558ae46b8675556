import json

import pytest

from protopipe.config import ConfigError, parse_config, parse_config_dict


def write(tmp_path, payload):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload))
    return path


def test_minimal_config_fully_defaulted(tmp_path):
    cfg = parse_config(write(tmp_path, {"seed": 7, "backbone": {"kind": "mlp"},
                                        "data": {}}))
    assert cfg.seed == 7
    assert cfg.train.epochs == 100
    assert cfg.train.episodes_per_epoch == 2000
    assert cfg.train.lr_min == 1e-6 and cfg.train.lr_max == 5e-5
    assert cfg.train.warmup_epochs == 5
    assert cfg.finetune.lr_grid == (0.01, 0.001, 0.0001, 0.0)
    assert cfg.finetune.steps == 50 and cfg.finetune.val_tasks == 5
    assert cfg.finetune.augment.apply_probability == 0.9
    assert cfg.sampler.queries_per_class == 15
    assert cfg.eval_episodes == 600
    # omitted per-section seeds inherit the master seed
    assert cfg.backbone.seed == 7 and cfg.sampler.seed == 7


def test_unknown_key_named(tmp_path):
    with pytest.raises(ConfigError, match="learnig_rate"):
        parse_config(write(tmp_path, {"train": {"learnig_rate": 0.1}}))


def test_nested_unknown_key_has_path(tmp_path):
    with pytest.raises(ConfigError, match="finetune.augment.sigm"):
        parse_config(write(tmp_path, {"finetune": {"augment": {"sigm": 1}}}))


def test_lr_grid_without_zero_rejected(tmp_path):
    with pytest.raises(ConfigError, match="0"):
        parse_config(write(tmp_path, {"finetune": {"lr_grid": [0.01, 0.001]}}))


def test_invalid_json_reports_line(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"seed": 1,\n  "oops"\n}')
    with pytest.raises(ConfigError, match="line 3"):
        parse_config(path)


def test_digest_stable_and_seed_sensitive():
    a = parse_config_dict({"seed": 1})
    b = parse_config_dict({"seed": 1})
    c = parse_config_dict({"seed": 2})
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()


def test_explicit_section_seed_wins():
    cfg = parse_config_dict({"seed": 3, "pretrain": {"seed": 9}})
    assert cfg.pretrain.seed == 9
    assert cfg.train.seed == 3


def test_shift_section_parsed():
    cfg = parse_config_dict({"data": {"shift": {"kind": "sigma_rescale",
                                                "factor": 2.0}}})
    assert cfg.shift.kind == "sigma_rescale"
    assert cfg.shift.factor == 2.0


def test_shift_unknown_key(tmp_path):
    with pytest.raises(ConfigError, match="data.shift"):
        parse_config_dict({"data": {"shift": {"knid": "sigma_rescale"}}})


def test_constraint_violation_surfaces():
    with pytest.raises(ConfigError, match="noise_sigma|class_sep"):
        parse_config_dict({"data": {"synthetic": {"noise_sigma": -1.0}}})


def test_sampler_ranges_accepted():
    cfg = parse_config_dict({"sampler": {"way": [2, 7], "shot": [1, 5]}})
    assert cfg.sampler.way_range == (2, 7)
    assert cfg.sampler.shot_range == (1, 5)
