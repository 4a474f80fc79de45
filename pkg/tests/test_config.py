import pytest
import yaml

from cqe.config import (
    ConfigError,
    DEFAULTS,
    deep_merge,
    resolve,
    save_resolved,
    train_config_from,
)
from cqe.train import Ablation


def test_defaults_resolve():
    cfg = resolve(environ={})
    assert cfg["loss"]["lambda_R"] == 0.1
    assert cfg["percept"]["tap"]["block"] == 5


def test_precedence_file_env_flags(tmp_path):
    cfg_file = tmp_path / "cfg.yaml"
    cfg_file.write_text(yaml.safe_dump({"loss": {"lambda_r": 0.5, "lambda_p": 0.25}}))
    environ = {"CQE_loss__lambda_r": "0.75", "CQE_train__steps": "7"}
    cfg = resolve(config_path=cfg_file, sets=["loss.lambda_r=0.9"], environ=environ)
    assert cfg["loss"]["lambda_r"] == 0.9  # flag wins
    assert cfg["loss"]["lambda_p"] == 0.25  # file survives
    assert cfg["train"]["steps"] == 7  # env wins over default


def test_env_exact_case_for_lambda_R():
    cfg = resolve(environ={"CQE_loss__lambda_R": "0.4"})
    assert cfg["loss"]["lambda_R"] == 0.4
    assert cfg["loss"]["lambda_r"] == DEFAULTS["loss"]["lambda_r"]


def test_codec_binary_env_vars_not_treated_as_config():
    cfg = resolve(environ={"CQE_BPGENC": "/opt/bpgenc"})
    assert "BPGENC" not in cfg


def test_missing_config_file():
    with pytest.raises(ConfigError, match="not found"):
        resolve(config_path="/nonexistent/cfg.yaml", environ={})


def test_bad_set_syntax():
    with pytest.raises(ConfigError, match="--set"):
        resolve(sets=["no_equals_sign"], environ={})


def test_deep_merge_nested():
    merged = deep_merge({"a": {"b": 1, "c": 2}}, {"a": {"b": 9}})
    assert merged == {"a": {"b": 9, "c": 2}}


def test_save_resolved_round_trip(tmp_path):
    cfg = resolve(environ={})
    path = save_resolved(cfg, tmp_path)
    assert path.name == "config.resolved"
    assert yaml.safe_load(path.read_text()) == cfg


def test_train_config_from_resolved():
    cfg = resolve(
        sets=[
            "train.ablation=reg_only",
            "train.steps=3",
            "model.generator.channels=8",
            "percept.backbone.kind=tiny",
        ],
        environ={},
    )
    tc = train_config_from(cfg)
    assert tc.ablation is Ablation.REG_ONLY
    assert not tc.conditional
    assert tc.generator.channels == 8
    assert tc.extractor.kind == "tiny"


def test_conditional_conflict_detected():
    cfg = resolve(
        sets=["train.ablation=vanilla", "loss.conditional=true"], environ={}
    )
    with pytest.raises(ConfigError, match="conflicts with ablation"):
        train_config_from(cfg)


def test_conditional_consistent_accepted():
    cfg = resolve(sets=["train.ablation=full", "loss.conditional=true"], environ={})
    tc = train_config_from(cfg)
    assert tc.conditional
