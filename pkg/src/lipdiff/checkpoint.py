"""Checkpoint directories: torch weight files keyed by parameter name plus a JSON sidecar."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .audiofeat import FeatureStats
from .condnet import ConditionedUNet, UNetConfig
from .io import DataError, read_json, write_json
from .schedule import NoiseSchedule, make_schedule

MODEL_FILE = "model.pt"
EMA_FILE = "ema.pt"
OPTIM_FILE = "optimizer.pt"
META_FILE = "meta.json"


@dataclass
class Checkpoint:
    model: ConditionedUNet
    schedule: NoiseSchedule
    stats: FeatureStats
    meta: dict
    path: Path

    @property
    def step(self) -> int:
        return int(self.meta["step"])


def save_checkpoint(path, model, schedule: NoiseSchedule, stats: FeatureStats, meta: dict, optimizer=None, ema=None) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        torch.save(model.state_dict(), path / MODEL_FILE)
        if optimizer is not None:
            torch.save(optimizer.state_dict(), path / OPTIM_FILE)
        if ema is not None:
            torch.save(ema.state_dict(), path / EMA_FILE)
        sidecar = {
            **meta,
            "unet": model.config.to_dict(),
            "schedule": schedule.to_config(),
            "feature_stats": stats.to_dict(),
            "has_ema": ema is not None,
        }
        write_json(path / META_FILE, sidecar)
    except OSError as exc:
        raise OSError(f"failed to write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path, use_ema: bool = False, map_location="cpu") -> Checkpoint:
    path = Path(path)
    if not (path / META_FILE).exists():
        raise DataError(f"{path} is not a checkpoint directory (no {META_FILE})")
    meta = read_json(path / META_FILE)
    model = ConditionedUNet(UNetConfig.from_dict(meta["unet"]))
    weights = EMA_FILE if use_ema and meta.get("has_ema") else MODEL_FILE
    model.load_state_dict(torch.load(path / weights, map_location=map_location, weights_only=True))
    model.eval()
    return Checkpoint(model, make_schedule(meta["schedule"]), FeatureStats.from_dict(meta["feature_stats"]), meta, path)


def load_optimizer_state(path, optimizer):
    optimizer.load_state_dict(torch.load(Path(path) / OPTIM_FILE, map_location="cpu", weights_only=True))
