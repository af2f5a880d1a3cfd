"""Noise schedules and the closed-form forward / stepwise reverse diffusion algebra.

Step indices are 0-based: index ``t`` corresponds to diffusion step ``t + 1``
in the usual 1..T numbering.

``q_sample`` and ``reverse_step`` only use elementwise arithmetic, so they work
on numpy arrays and torch tensors alike.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta / alpha / alpha_bar tables for a ``num_steps`` diffusion process.

    ``timesteps`` maps each step of this schedule to its index in the schedule it
    was respaced from (identity for a freshly built schedule).
    """

    kind: str
    num_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    timesteps: np.ndarray = field(default=None)  # type: ignore[assignment]
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.timesteps is None:
            object.__setattr__(self, "timesteps", np.arange(self.num_steps))
        for name in ("betas", "alphas", "alpha_bars", "timesteps"):
            arr = getattr(self, name)
            if len(arr) != self.num_steps:
                raise ValueError(f"{name} has length {len(arr)}, expected {self.num_steps}")
            arr.setflags(write=False)
        if not np.all((self.betas > 0) & (self.betas < 1)):
            raise ValueError("betas must lie in (0, 1)")
        if not np.all((self.alpha_bars > 0) & (self.alpha_bars < 1)):
            raise ValueError("alpha_bars must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ValueError("alpha_bars must be strictly decreasing")

    def __len__(self):
        return self.num_steps

    def to_config(self) -> dict:
        return {"kind": self.kind, "num_steps": int(self.num_steps), **self.params}


def _from_betas(kind: str, betas: np.ndarray, params: dict) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(kind, len(betas), betas, alphas, np.cumprod(alphas), params=params)


def make_linear_schedule(T: int, beta_start: float = 1e-6, beta_end: float = 0.01) -> NoiseSchedule:
    """Betas linearly spaced from ``beta_start`` (first step) to ``beta_end`` (last step)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return _from_betas("linear", betas, {"beta_start": beta_start, "beta_end": beta_end})


def make_cosine_schedule(T: int, offset: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Squared-cosine alpha_bar curve, betas clipped to ``max_beta``.

    alpha_bars are rebuilt as the running product of the clipped alphas, so the
    last entry stays strictly positive even though the raw curve reaches zero.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < offset < 1:
        raise ValueError(f"offset must lie in (0, 1), got {offset}")

    u = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((u / T + offset) / (1 + offset)) * math.pi / 2) ** 2
    betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, max_beta)
    if np.any(betas <= 0):
        raise ValueError("cosine schedule produced a non-positive beta")
    return _from_betas("cosine", betas, {"cosine_offset": offset})


def make_schedule(config: dict) -> NoiseSchedule:
    """Build a schedule from its serialized run-config form."""
    kind = config.get("kind", "linear")
    T = int(config["num_steps"])
    if kind == "linear":
        return make_linear_schedule(T, config.get("beta_start", 1e-6), config.get("beta_end", 0.01))
    if kind == "cosine":
        return make_cosine_schedule(T, config.get("cosine_offset", 0.008))
    raise ValueError(f"unknown schedule kind {kind!r}")


def _check_step(t, T: int):
    if isinstance(t, torch.Tensor):
        bad = bool(((t < 0) | (t >= T)).any())
    else:
        arr = np.asarray(t)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"step index must be an integer, got {t!r}")
        bad = bool(np.any((arr < 0) | (arr >= T)))
    if bad:
        raise ValueError(f"step index {t} out of range [0, {T})")


def _coef(table: np.ndarray, t, like: Any):
    """Look up ``table[t]``; per-example steps are broadcast over the trailing dims of ``like``."""
    if np.ndim(t) == 0 and not (isinstance(t, torch.Tensor) and t.ndim > 0):
        return float(table[int(t)])
    if isinstance(like, torch.Tensor):
        idx = t.cpu() if isinstance(t, torch.Tensor) else torch.as_tensor(np.asarray(t))
        vals = torch.tensor(table[np.asarray(idx)], dtype=like.dtype).to(like.device)
    else:
        vals = table[np.asarray(t)].astype(like.dtype, copy=False)
    return vals.reshape(vals.shape + (1,) * (like.ndim - 1))


def q_sample(y0, t, eps, schedule: NoiseSchedule):
    """Noise ``y0`` straight to step ``t``: sqrt(ab)*y0 + sqrt(1-ab)*eps.

    ``t`` may be an int, or a 1-D array of per-example steps matching the
    leading dimension of ``y0``.
    """
    if tuple(y0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: y0 {tuple(y0.shape)} vs eps {tuple(eps.shape)}")
    _check_step(t, schedule.num_steps)
    ab = schedule.alpha_bars
    return _coef(np.sqrt(ab), t, y0) * y0 + _coef(np.sqrt(1.0 - ab), t, y0) * eps


def reverse_step(y_t, eps_hat, t: int, schedule: NoiseSchedule, noise=None):
    """One ancestral denoising step from index ``t`` to ``t - 1``.

    Variance is fixed to beta_t. Pass ``noise=None`` (or zeros) for the final step.
    """
    if tuple(y_t.shape) != tuple(eps_hat.shape):
        raise ValueError(f"shape mismatch: y_t {tuple(y_t.shape)} vs eps_hat {tuple(eps_hat.shape)}")
    _check_step(t, schedule.num_steps)
    alpha = float(schedule.alphas[t])
    ab = float(schedule.alpha_bars[t])
    mean = (y_t - ((1.0 - alpha) / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(alpha)
    if noise is None:
        return mean
    if tuple(noise.shape) != tuple(y_t.shape):
        raise ValueError("noise must match y_t in shape")
    return mean + math.sqrt(1.0 - alpha) * noise


def respace_schedule(schedule: NoiseSchedule, num_inference_steps: int) -> NoiseSchedule:
    """Evenly strided sub-schedule that always keeps the last (noisiest) step.

    Asking for every step returns ``schedule`` itself.
    """
    T = schedule.num_steps
    K = int(num_inference_steps)
    if not 1 <= K <= T:
        raise ValueError(f"num_inference_steps must lie in [1, {T}], got {num_inference_steps}")
    if K == T:
        return schedule
    idx = (np.arange(1, K + 1) * T) // K - 1
    alpha_bars = schedule.alpha_bars[idx].copy()
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    betas = 1.0 - alpha_bars / prev
    return NoiseSchedule(
        schedule.kind,
        K,
        betas,
        1.0 - betas,
        alpha_bars,
        timesteps=schedule.timesteps[idx].copy(),
        params=dict(schedule.params),
    )


def resolve_steps(schedule: NoiseSchedule, steps: Optional[int | str]) -> NoiseSchedule:
    """``steps`` of None or ``"full"`` keeps the training schedule."""
    if steps is None or steps == "full":
        return schedule
    return respace_schedule(schedule, int(steps))
