"""Backbone registry and checkpoint loading."""
from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigurationError, DataError
from .mpnn import Mpnn, MpnnConfig
from .nn import CHECKPOINT_FORMAT, EnergyModel, decode_arrays
from .schnet import Schnet, SchnetConfig

BACKBONES = {"mpnn": (Mpnn, MpnnConfig), "schnet": (Schnet, SchnetConfig)}


def build_model(backbone: str, config: dict | None = None) -> EnergyModel:
    """Fresh model of the given backbone from a plain config dict."""
    if backbone not in BACKBONES:
        raise ConfigurationError(f"unknown backbone {backbone!r}; expected one of {sorted(BACKBONES)}")
    cls, cfg_cls = BACKBONES[backbone]
    return cls(cfg_cls.from_dict(dict(config or {})))


def model_from_checkpoint(blob: dict) -> EnergyModel:
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"not a checkpoint (format {blob.get('format')!r})")
    model = build_model(blob["family"], blob["config"])
    state = decode_arrays(blob["params"])
    state.update(decode_arrays(blob["buffers"]))
    model.load_state_dict(state)
    return model


def load_checkpoint(path) -> EnergyModel:
    try:
        blob = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc.msg})") from None
    return model_from_checkpoint(blob)
