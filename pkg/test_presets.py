#!/usr/bin/env python3
"""
Tests for scenario presets, config overlays and process settings
"""

import json
import math

import pytest
from pydantic import ValidationError

from config.presets import PRESET_NAMES, build_preset, deep_merge, load_spec, preset_settings
from config.settings import get_settings, reset_settings
from models.experiment import EvalConfig
from services.errors import ConfigError


@pytest.mark.parametrize("preset", PRESET_NAMES)
@pytest.mark.parametrize("scale", ["desk", "paper"])
def test_every_preset_validates(preset, scale):
    spec = build_preset(preset, scale)
    assert spec.preset == preset
    assert spec.scale == scale


def test_paper_scale_values():
    miso = build_preset("miso-sd", "paper")
    assert (miso.system.N, miso.system.K, miso.system.M) == (64, 16, 1)
    assert miso.geometry.psi == pytest.approx(math.pi / 16)
    assert miso.nets.d_latent == 32
    assert (miso.train.batch_size, miso.train.lr, miso.train.n_en, miso.train.n_de) == (128, 1e-4, 2, 8)
    assert miso.train.optimizer == "sgd"
    mimo = build_preset("mimo-sd", "paper")
    assert (mimo.system.K, mimo.system.M) == (4, 4)
    assert mimo.geometry.psi == pytest.approx(math.pi / 4)
    assert build_preset("mimo-sc", "paper").geometry.phi == pytest.approx(math.pi / 2)
    hybrid = build_preset("hybrid-ff", "paper")
    assert hybrid.hybrid.n_rf == 16 and hybrid.system.N == 64
    near = build_preset("hybrid-nf", "paper").hybrid
    assert (near.S, near.n_sub, near.wavelength, near.r_c, near.sigma_r) == (16, 4, 3e-3, 3.0, 1.0)


def test_desk_scale_values():
    spec = build_preset("miso-sd", "desk")
    assert (spec.system.N, spec.system.K, spec.nets.d_latent, spec.train.batch_size) == (16, 4, 16, 64)
    assert spec.feedback.sigma2_z == pytest.approx(0.1)
    assert spec.system.sigma2_h == pytest.approx(0.1)


def test_unknown_preset_lists_valid_names():
    with pytest.raises(ConfigError) as excinfo:
        preset_settings("miso-xx")
    for name in PRESET_NAMES:
        assert name in str(excinfo.value)
    with pytest.raises(ConfigError):
        preset_settings("miso-sd", "huge")


def test_deep_merge_does_not_mutate():
    base = {"a": {"b": 1, "c": 2}}
    merged = deep_merge(base, {"a": {"b": 5}})
    assert merged == {"a": {"b": 5, "c": 2}}
    assert base == {"a": {"b": 1, "c": 2}}


def test_config_file_overlay(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"train": {"epochs": 3}, "eval": {"snr_db": [10]}}))
    spec = load_spec("miso-sc", "desk", config_path=path, seed=9)
    assert spec.train.epochs == 3
    assert spec.eval.snr_db == [10]
    assert spec.seed == 9
    assert spec.system.N == 16


def test_bad_config_files(tmp_path):
    with pytest.raises(ConfigError):
        load_spec("miso-sd", config_path=tmp_path / "absent.json")
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_spec("miso-sd", config_path=path)
    path.write_text(json.dumps({"plotting": {}}))
    with pytest.raises(ConfigError):
        load_spec("miso-sd", config_path=path)


def test_invalid_values_become_config_errors():
    with pytest.raises(ConfigError):
        load_spec("miso-sd", overrides={"geometry": {"psi": math.pi}})
    with pytest.raises(ConfigError):
        load_spec("miso-sd", overrides={"system": {"P": -1}})


def test_eval_config_validation():
    with pytest.raises(ValidationError):
        EvalConfig(baselines=[])
    with pytest.raises(ValidationError):
        EvalConfig(baselines=["wmmse"])
    with pytest.raises(ValidationError):
        EvalConfig(snr_db=[])


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("BEAMSIM_THREADS", "3")
    monkeypatch.setenv("BEAMSIM_LOG_FORMAT", "console")
    reset_settings()
    try:
        settings = get_settings()
        assert settings.threads == 3
        assert settings.log_format == "console"
    finally:
        reset_settings()


def test_projection_needs_a_digital_system():
    with pytest.raises(ConfigError):
        load_spec("hybrid-ff", overrides={"train": {"project": True}})
    assert load_spec("miso-sd", overrides={"train": {"project": True}}).train.project
