"""Run configuration: one JSON key-value file, flag overrides, and a content fingerprint."""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .condnet import UNetConfig
from .io import DataError, fingerprint
from .schedule import NoiseSchedule, make_schedule
from .trainer import TrainConfig

DEFAULTS = {
    "seed": 0,
    "data": {"root": None, "image_size": 128},
    "schedule": {"kind": "linear", "num_steps": 2000, "beta_start": 1e-6, "beta_end": 0.01},
    "unet": UNetConfig.multi_speaker().to_dict(),
    "train": TrainConfig().to_dict(),
    "metrics": {"region": "masked"},
}


def merge(base: dict, override: dict) -> dict:
    """Recursive dict update; returns a new dict."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


class RunConfig:
    """Validated union of the model, training, schedule, data and metric settings."""

    def __init__(self, values: dict | None = None):
        self.values = merge(DEFAULTS, values or {})
        unknown = set(self.values) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        self.values["train"]["seed"] = int(self.values["seed"])
        self.values["unet"]["image_size"] = int(self.values["data"]["image_size"])
        # build once so bad values fail before any work starts
        self.unet()
        self.train()
        self.schedule()

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        values = {}
        if path is not None:
            try:
                values = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise DataError(f"cannot read config {path}: {exc}") from exc
        return cls(merge(values, overrides or {}))

    def unet(self) -> UNetConfig:
        return UNetConfig.from_dict(self.values["unet"])

    def train(self) -> TrainConfig:
        return TrainConfig(**self.values["train"])

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.values["schedule"])

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.values)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.values)
