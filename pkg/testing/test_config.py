#!/usr/bin/env python3
"""
Configuration tests
- run files, overrides and defaults
- problems reported with the offending key and line
"""

import pytest

from core.config import Config, RunConfig
from core.exceptions import ConfigError


def _write(tmp_path, text):
    path = tmp_path / "run.env"
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_defaults_are_resolved(tmp_path):
    cfg = RunConfig.from_file(_write(tmp_path, "vocab_size=8\n"))
    assert cfg.mode == "masked" and cfg.seed == 0
    assert cfg["split_base"] == 0
    assert cfg["is_a"] == pytest.approx(0.2) and cfg["is_b"] == pytest.approx(0.8)
    assert cfg["stop_delta"] == pytest.approx(1e-3)
    assert cfg["source.probs"] == [0.125] * 8
    assert cfg["model.hidden"] == [128, 128]


def test_large_vocabularies_split_by_default():
    cfg = RunConfig.from_mapping({"vocab_size": "1000"})
    assert cfg["split_base"] == 16
    assert RunConfig.from_mapping({"vocab_size": "1000", "split_base": "none"})["split_base"] == 0


def test_overrides_win(tmp_path):
    path = _write(tmp_path, "vocab_size=8\ntrain.steps=10\n")
    cfg = RunConfig.from_file(path, overrides=["train.steps=3", "mode=uniform"])
    assert cfg["train.steps"] == 3 and cfg.mode == "uniform"
    with pytest.raises(ConfigError):
        RunConfig.from_file(path, overrides=["train.steps"])


def test_unknown_key_reports_line_number(tmp_path):
    path = _write(tmp_path, "# comment\nvocab_size=8\n\ntrain.stepz=10\n")
    with pytest.raises(ConfigError) as info:
        RunConfig.from_file(path)
    assert ("train.stepz", 4, "unknown key") in info.value.problems
    assert "line 4" in str(info.value)


def test_bad_value_reports_key(tmp_path):
    with pytest.raises(ConfigError) as info:
        RunConfig.from_file(_write(tmp_path, "vocab_size=eight\n"))
    assert info.value.problems[0][:2] == ("vocab_size", 1)


def test_time_varying_lambda_is_rejected():
    with pytest.raises(ConfigError) as info:
        RunConfig.from_mapping({"vocab_size": "8", "mode": "mixture", "lambda_mask": "0.9,0.1"})
    assert "time-varying" in str(info.value)
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"vocab_size": "8", "lambda_mask": "1.5"})


def test_cross_field_checks():
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"vocab_size": "8", "split_base": "8"})
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"vocab_size": "8", "is_a": "0.9", "is_b": "0.5"})
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"vocab_size": "3", "source.probs": "0.5,0.5"})
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"vocab_size": "2", "source.kind": "markov"})
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"vocab_size": "8", "eval.quad": "4"})
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({})


def test_text_data_fixes_the_alphabet():
    cfg = RunConfig.from_mapping({"data.kind": "text", "data.path": "corpus.txt"})
    assert cfg["vocab_size"] == 27
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"data.kind": "text", "data.path": "corpus.txt", "vocab_size": "30"})
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"data.kind": "text"})


def test_markov_matrix_parsing():
    cfg = RunConfig.from_mapping({"vocab_size": "2", "source.kind": "markov", "source.matrix": "0.9,0.1;0.5,0.5"})
    assert cfg["source.matrix"] == [[0.9, 0.1], [0.5, 0.5]]


def test_decreasing_noise_only_warns(caplog):
    RunConfig.from_mapping({"vocab_size": "8", "sigma0": "1.0", "sigmaT": "0.1"})
    assert "sigma0 >= sigmaT" in caplog.text


def test_missing_file():
    with pytest.raises(ConfigError):
        RunConfig.from_file("does/not/exist.env")


def test_environment_settings_validate():
    assert Config.validate()
