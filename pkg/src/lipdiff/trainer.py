"""Masked noise-prediction objective and the seeded, resumable training loop."""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .audiofeat import FeatureStats
from .checkpoint import load_checkpoint, load_optimizer_state, save_checkpoint
from .condnet import ConditionedUNet, UNetConfig
from .dataset import TrainingPairs
from .io import fingerprint
from .schedule import NoiseSchedule
from .videoprep import apply_forward_noise, assemble_input

log = logging.getLogger(__name__)

LOSS_LOG = "loss_log.csv"


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 16
    epochs: int = 1
    max_steps: int | None = None
    ema_decay: float | None = None
    seed: int = 0
    loss_mask_mode: str = "masked_region"
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_mask_mode != "masked_region":
            raise ValueError(f"unsupported loss_mask_mode {self.loss_mask_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def masked_loss(eps_hat: torch.Tensor, eps: torch.Tensor, mask) -> torch.Tensor:
    """Mean squared error over masked elements only.

    ``mask`` broadcasts against the [B, C, H, W] inputs (typically [B, 1, H, W]);
    unmasked positions add nothing to the value or the gradient.
    """
    if eps_hat.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_hat.shape)} vs {tuple(eps.shape)}")
    m = torch.as_tensor(mask, device=eps.device).bool().expand_as(eps)
    count = int(m.sum())
    if count == 0:
        raise ValueError("mask selects no pixels")
    diff = torch.where(m, eps_hat - eps, torch.zeros((), dtype=eps.dtype, device=eps.device))
    return diff.pow(2).sum() / count


def sample_timesteps(batch_size: int, num_steps: int, generator: torch.Generator) -> torch.Tensor:
    return torch.randint(0, num_steps, (batch_size,), generator=generator)


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def train_step(model: ConditionedUNet, optimizer, batch: dict, schedule: NoiseSchedule, generator: torch.Generator,
               step: int = 0) -> float:
    """One gradient step on a batch; returns the batch loss."""
    frame = batch["frame"]
    B = frame.shape[0]
    t = sample_timesteps(B, schedule.num_steps, generator)
    eps = torch.randn(frame.shape, generator=generator, dtype=frame.dtype)
    mask = batch["mask"]
    noisy = apply_forward_noise(frame, mask, t, eps, schedule)
    x = assemble_input(noisy, batch["previous"], batch["identity"], mask, model.config.include_mask_channel)
    alpha_bar = torch.tensor(schedule.alpha_bars[t.numpy()], dtype=frame.dtype)

    model.train()
    eps_hat = model(x, batch["audio"], alpha_bar)
    loss = masked_loss(eps_hat, eps, mask)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss at step {step}: t={t.tolist()} batch={batch.get('ids')}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def make_optimizer(model, lr: float):
    return torch.optim.Adam(model.parameters(), lr=lr)


def _update_ema(ema, model, decay: float):
    with torch.no_grad():
        for pe, p in zip(ema.parameters(), model.parameters()):
            pe.mul_(decay).add_(p, alpha=1 - decay)


def total_steps(cfg: TrainConfig, n_pairs: int) -> int:
    if cfg.max_steps is not None:
        return int(cfg.max_steps)
    return cfg.epochs * math.ceil(n_pairs / cfg.batch_size)


def batch_indices(cfg: TrainConfig, n_pairs: int, step: int) -> np.ndarray:
    """Indices of the pairs used at global ``step``; each epoch is a seeded permutation."""
    per_epoch = math.ceil(n_pairs / cfg.batch_size)
    epoch, pos = divmod(step, per_epoch)
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n_pairs)
    return order[pos * cfg.batch_size : (pos + 1) * cfg.batch_size]


def train_loop(
    pairs: TrainingPairs,
    train_cfg: TrainConfig,
    unet_cfg: UNetConfig,
    schedule: NoiseSchedule,
    out_dir,
    stats: FeatureStats,
    resume=None,
    run_config: dict | None = None,
) -> list[Path]:
    """Train and write checkpoints under ``out_dir``; returns the checkpoint paths written.

    Data order, timesteps, noise and dropout are all derived from (seed, step),
    so a run resumed from step k continues exactly as the uninterrupted run would.
    """
    if len(pairs) == 0:
        raise ValueError("empty dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_config = run_config or {}
    fp = fingerprint({"run": run_config, "unet": unet_cfg.to_dict(), "train": train_cfg.to_dict(),
                      "schedule": schedule.to_config()})

    start = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        model = ck.model
        start = ck.step
    else:
        torch.manual_seed(train_cfg.seed)
        model = ConditionedUNet(unet_cfg)
    optimizer = make_optimizer(model, train_cfg.learning_rate)
    ema = None
    if train_cfg.ema_decay:
        ema = copy.deepcopy(model)
        if resume is not None and ck.meta.get("has_ema"):
            ema.load_state_dict(load_checkpoint(resume, use_ema=True).model.state_dict())
    if resume is not None:
        load_optimizer_state(resume, optimizer)

    n = len(pairs)
    end = total_steps(train_cfg, n)
    per_epoch = math.ceil(n / train_cfg.batch_size)
    log_path = out_dir / LOSS_LOG
    new_log = not log_path.exists() or resume is None
    written = []

    def checkpoint(step: int) -> Path:
        meta = {
            "step": step,
            "epoch": step // per_epoch,
            "seed": train_cfg.seed,
            "train": train_cfg.to_dict(),
            "run_config": run_config,
            "fingerprint": fp,
        }
        p = save_checkpoint(out_dir / f"ckpt_{step:08d}", model, schedule, stats, meta, optimizer, ema)
        written.append(p)
        return p

    if start == 0 and resume is None:
        checkpoint(0)
    t0 = time.time()
    with open(log_path, "w" if new_log else "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_log:
            writer.writerow(["step", "epoch", "loss", "wall_time"])
        for step in range(start, end):
            batch = pairs.batch(batch_indices(train_cfg, n, step))
            seed = step_seed(train_cfg.seed, step)
            torch.manual_seed(seed)
            gen = torch.Generator().manual_seed(seed)
            loss = train_step(model, optimizer, batch, schedule, gen, step)
            if ema is not None:
                _update_ema(ema, model, train_cfg.ema_decay)
            writer.writerow([step + 1, step // per_epoch, repr(loss), f"{time.time() - t0:.3f}"])
            if (step + 1) % 100 == 0:
                fh.flush()
                log.info("step %d loss %.5f", step + 1, loss)
            if (step + 1) % train_cfg.checkpoint_every == 0 and step + 1 != end:
                checkpoint(step + 1)
    if end > start:
        checkpoint(end)
    return written


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"step": int(r["step"]), "epoch": int(r["epoch"]), "loss": float(r["loss"]),
                 "wall_time": float(r["wall_time"])} for r in csv.DictReader(fh)]
