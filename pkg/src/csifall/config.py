"""Run configuration: one JSON document with a section per pipeline stage."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .augment import AugmentPolicy
from .model import DvgConfig, ModelConfig
from .stream import SmootherConfig
from .synth import SynthSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


class PreprocessConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    window: int = 5000
    step: int = 5000
    downsample: int = 8
    method: Literal["mean", "decimate"] = "mean"
    lowpass: bool = False
    causal: bool = True
    cutoff_hz: float = 50.0
    order: int = 4


class RunConfig(BaseModel):
    """``augment`` and ``dvg`` live at top level and are injected into the training/model sections."""

    model_config = ConfigDict(extra="forbid")

    preprocess: PreprocessConfig = PreprocessConfig()
    augment: AugmentPolicy = AugmentPolicy()
    dvg: DvgConfig = DvgConfig()
    model: ModelConfig = ModelConfig()
    training: TrainConfig = TrainConfig()
    stream: SmootherConfig = SmootherConfig()
    synth: SynthSpec = SynthSpec()

    @model_validator(mode="before")
    @classmethod
    def _no_nested_duplicates(cls, data):
        if isinstance(data, dict):
            if isinstance(data.get("training"), dict) and "augment" in data["training"]:
                raise ValueError("set augmentation in the top-level 'augment' section, not training.augment")
            if isinstance(data.get("model"), dict) and "dvg" in data["model"]:
                raise ValueError("set gate options in the top-level 'dvg' section, not model.dvg")
        return data

    @model_validator(mode="after")
    def _inject(self):
        self.training = self.training.model_copy(update={"augment": self.augment})
        self.model = self.model.model_copy(update={"dvg": self.dvg})
        return self

    def to_json(self) -> str:
        doc = self.model_dump(mode="json", exclude={"training": {"augment"}, "model": {"dvg"}})
        return json.dumps(doc, indent=1, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config (or defaults) and apply dotted-key overrides like ``{"training.epochs": 3}``."""
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a JSON object")
    for key, value in (overrides or {}).items():
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {p} is not a section")
        node[parts[-1]] = value
    return RunConfig.model_validate(doc)
