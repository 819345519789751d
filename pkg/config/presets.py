"""
Beamsim Scenario Presets
Named scenarios at desk and paper scale, plus JSON config overlays
"""

import copy
import json
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic import ValidationError

from models.experiment import ExperimentSpec
from services.errors import ConfigError

CONFIG_SECTIONS = ("system", "geometry", "hybrid", "nets", "train", "feedback", "eval")


class Preset(Enum):
    """Scenario presets"""
    MISO_SC = "miso-sc"
    MISO_SD = "miso-sd"
    MIMO_SC = "mimo-sc"
    MIMO_SD = "mimo-sd"
    HYBRID_FF = "hybrid-ff"
    HYBRID_NF = "hybrid-nf"


class Scale(Enum):
    """Problem scale"""
    DESK = "desk"
    PAPER = "paper"


PRESET_NAMES = [p.value for p in Preset]
SCALE_NAMES = [s.value for s in Scale]


def _system_settings(preset: Preset, scale: Scale) -> Dict[str, Any]:
    """Antenna and user counts"""
    mimo = preset in (Preset.MIMO_SC, Preset.MIMO_SD)
    if scale == Scale.PAPER:
        return {"N": 64, "K": 4, "M": 4} if mimo else {"N": 64, "K": 16, "M": 1}
    return {"N": 16, "K": 2, "M": 2} if mimo else {"N": 16, "K": 4, "M": 1}


def _geometry_settings(preset: Preset) -> Dict[str, Any]:
    """Sector angles for each placement scenario"""
    if preset in (Preset.MISO_SC, Preset.MIMO_SC):
        return {"kind": "single-cell", "phi": math.pi / 2}
    psi = math.pi / 4 if preset == Preset.MIMO_SD else math.pi / 16
    return {"kind": "spatial-division", "psi": psi}


def _hybrid_settings(preset: Preset, scale: Scale, system: Dict[str, Any]) -> Optional[Dict[str, Any]]:
    """RF chains and near-field array geometry"""
    if preset == Preset.HYBRID_FF:
        return {"mode": "far-field", "n_rf": system["K"] * system["M"]}
    if preset == Preset.HYBRID_NF:
        if scale == Scale.PAPER:
            return {"mode": "near-field", "n_rf": system["K"], "S": 16, "n_sub": 4,
                    "wavelength": 3e-3, "r_c": 3.0, "sigma_r": 1.0}
        # Rayleigh distance of the 16-element array is 0.384 m
        return {"mode": "near-field", "n_rf": system["K"], "S": 4, "n_sub": 4,
                "wavelength": 3e-3, "r_c": 0.25, "sigma_r": 0.05}
    return None


def _net_settings(preset: Preset, scale: Scale) -> Dict[str, Any]:
    """Subnetwork widths"""
    if scale == Scale.PAPER:
        mimo = preset in (Preset.MIMO_SC, Preset.MIMO_SD)
        return {"d_latent": 64 if mimo else 32}
    return {
        "d_latent": 16,
        "encoder_hidden": [128, 64],
        "beamdec_hidden": [256, 256],
        "chandec_hidden": [64, 128],
    }


def _train_settings(scale: Scale) -> Dict[str, Any]:
    """Training stage settings"""
    if scale == Scale.PAPER:
        return {"batch_size": 128, "lr": 1e-4, "optimizer": "sgd", "epochs": 1000, "chandec_epochs": 300}
    return {"batch_size": 64, "lr": 1e-3, "optimizer": "adam", "epochs": 300, "chandec_epochs": 100,
            "monitor_size": 64}


def _eval_settings(scale: Scale) -> Dict[str, Any]:
    """Evaluation grid"""
    if scale == Scale.PAPER:
        return {"test_size": 1000, "chunk_size": 100}
    return {"test_size": 200, "chunk_size": 50}


def preset_settings(preset: Union[Preset, str], scale: Union[Scale, str] = Scale.DESK) -> Dict[str, Any]:
    """Raw (unvalidated) settings dictionary for a preset"""
    try:
        preset = Preset(preset)
    except ValueError:
        raise ConfigError(f"unknown preset {preset!r}; valid presets: {', '.join(PRESET_NAMES)}") from None
    try:
        scale = Scale(scale)
    except ValueError:
        raise ConfigError(f"unknown scale {scale!r}; valid scales: {', '.join(SCALE_NAMES)}") from None

    system = _system_settings(preset, scale)
    settings: Dict[str, Any] = {
        "preset": preset.value,
        "scale": scale.value,
        "system": system,
        "geometry": _geometry_settings(preset),
        "nets": _net_settings(preset, scale),
        "train": _train_settings(scale),
        "eval": _eval_settings(scale),
    }
    hybrid = _hybrid_settings(preset, scale, system)
    if hybrid is not None:
        settings["hybrid"] = hybrid
    return settings


def deep_merge(base: Dict[str, Any], overlay: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge overlay into a copy of base"""
    merged = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Load a JSON config file with the known top-level sections"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a JSON object")
    unknown = sorted(set(data) - set(CONFIG_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}; expected {list(CONFIG_SECTIONS)}")
    return data


def build_preset(preset: Union[Preset, str], scale: Union[Scale, str] = Scale.DESK) -> ExperimentSpec:
    """Validated experiment spec for a preset"""
    return load_spec(preset, scale)


def load_spec(
    preset: Union[Preset, str],
    scale: Union[Scale, str] = Scale.DESK,
    config_path: Optional[Union[str, Path]] = None,
    seed: Optional[int] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> ExperimentSpec:
    """Preset, then config file, then explicit overrides, then seed"""
    settings = preset_settings(preset, scale)
    if config_path is not None:
        settings = deep_merge(settings, read_config_file(config_path))
    if overrides:
        settings = deep_merge(settings, overrides)
    if seed is not None:
        settings["seed"] = seed
    try:
        return ExperimentSpec.model_validate(settings)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment configuration: {e}") from e
