"""Run-config merging and validation."""

import json

import pytest

from eviground.config import RunConfig
from eviground.errors import ValidationError


def test_defaults_match_documented_values():
    cfg = RunConfig()
    assert cfg.cohort.n_patients == 100
    assert cfg.cohort.volume_dim == 16
    assert cfg.grounder.tau == 0.07
    assert cfg.grounder.lambda_mask == 1.0
    assert cfg.grounder.lambda_dice == 1.0
    assert cfg.grounder.lambda_bce == 1.0
    assert cfg.distill.distill_temperature == 2.0
    assert cfg.distill.lambda_kl == 1.0
    assert (cfg.rft.group_size, cfg.rft.epsilon, cfg.rft.beta) == (4, 0.2, 0.1)
    assert cfg.rft.lr == 0.05
    assert cfg.pretrain.lambda_res == 0.5
    assert cfg.pretrain.ema_momentum == 0.995
    assert cfg.cohort.rules.w_format == 0.2
    assert cfg.cohort.rules.w_nia == 0.5
    assert cfg.cohort.rules.w_consistency == 0.3


def test_partial_override(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 9, "grounder": {"epochs": 3}}))
    cfg = RunConfig.load(path)
    assert cfg.seed == 9
    assert cfg.grounder.epochs == 3
    assert cfg.grounder.tau == 0.07  # untouched default


def test_unknown_section_rejected():
    with pytest.raises(ValidationError):
        RunConfig.from_json({"nonsense": {}})


def test_unknown_key_rejected():
    with pytest.raises(ValidationError):
        RunConfig.from_json({"rft": {"learning": 1}})


def test_invalid_value_rejected():
    with pytest.raises(ValidationError):
        RunConfig.from_json({"rft": {"epsilon": 3.0}})


def test_json_roundtrip():
    cfg = RunConfig.from_json({"seed": 4, "cohort": {"n_patients": 12}})
    again = RunConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert again.seed == 4
    assert again.cohort.n_patients == 12
    assert again.cohort.rules == cfg.cohort.rules
