import json

import numpy as np
import pytest

from maect.config import ConfigError, RunConfig, config_from_dict, load_config, save_config, stage_rng


def test_defaults_round_trip(tmp_path):
    cfg = RunConfig()
    save_config(tmp_path / "c.json", cfg)
    assert load_config(tmp_path / "c.json") == cfg


def test_ct_settings_expressible_verbatim():
    cfg = config_from_dict({
        "stage": "ct", "epochs": 20, "tau": 0.2, "k": 20, "frozen_blocks": 12, "layer_decay": 0.65,
        "encoder_ema": 0.9999, "projector_ema": 0.99, "vit": {"depth": 24},
    })
    s = cfg.stage
    assert (s.epochs, s.tau, s.k, s.frozen_blocks, s.layer_decay) == (20, 0.2, 20, 12, 0.65)
    assert (s.encoder_ema, s.projector_ema) == (0.9999, 0.99)


def test_hyphenated_stage_name():
    assert config_from_dict({"stage": "head-init"}).stage.stage == "head_init"


def test_every_problem_is_listed():
    raw = {
        "tau": 0, "k": 0, "layer_decay": 1.5, "mask_ratio": 1.0, "batch_size": 1,
        "colour": "red", "vit": {"depth": 2, "bogus": 1},
    }
    with pytest.raises(ConfigError) as err:
        config_from_dict(raw)
    text = "\n".join(err.value.problems)
    for needle in ("tau", "k must", "layer_decay", "mask_ratio", "batch_size", "'colour'", "'bogus'"):
        assert needle in text
    assert len(err.value.problems) >= 7


def test_type_problems_are_all_reported():
    with pytest.raises(ConfigError) as err:
        config_from_dict({"epochs": 2.5, "combined": 1, "tau": "x"})
    assert len(err.value.problems) == 3


def test_cross_section_checks():
    with pytest.raises(ConfigError) as err:
        config_from_dict({"frozen_blocks": 9, "vit": {"depth": 8}, "head": {"in_dim": 32}})
    assert len(err.value.problems) == 2


def test_bad_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text(json.dumps([1, 2]))
    with pytest.raises(ConfigError):
        load_config(path)


def test_stage_rng_streams_are_independent_and_reproducible():
    a = stage_rng(0, "ct", "lookup").random(4)
    assert np.array_equal(a, stage_rng(0, "ct", "lookup").random(4))
    assert not np.array_equal(a, stage_rng(0, "ct", "mask").random(4))
    assert not np.array_equal(a, stage_rng(1, "ct", "lookup").random(4))
