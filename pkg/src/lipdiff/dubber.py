"""Autoregressive re-synthesis of the masked lower face, one frame at a time."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .audiofeat import FPS, FeatureStats, Waveform, all_windows, compute_mel, resample_to_16k
from .condnet import ConditionedUNet
from .io import save_frames, write_json
from .schedule import NoiseSchedule, resolve_steps, reverse_step
from .videoprep import MaskSpec, assemble_input


@dataclass
class DubRequest:
    frames: np.ndarray  # [N, 3, S, S] source frames in [-1, 1]
    masks: np.ndarray  # [N, S, S] bool
    audio: Waveform
    inference_steps: int | str = "full"
    seed: int = 0


@dataclass
class DubResult:
    frames: np.ndarray
    frame_seconds: list = field(default_factory=list)
    steps: int = 0
    seed: int = 0


def frame_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _as_mask(mask, shape) -> torch.Tensor:
    if isinstance(mask, MaskSpec):
        mask = mask.to_array(shape[-2], shape[-1])
    m = torch.as_tensor(np.asarray(mask)) if not isinstance(mask, torch.Tensor) else mask
    if m.ndim == 2:
        m = m[None]
    return m


def composite(generated, original, mask):
    """mask * generated + (1 - mask) * original, clamped to [-1, 1].

    Binary masks select pixels outright, so unmasked output pixels are the
    original values bit for bit.
    """
    gen = torch.as_tensor(generated)
    orig = torch.as_tensor(original)
    if gen.shape != orig.shape:
        raise ValueError(f"shape mismatch: {tuple(gen.shape)} vs {tuple(orig.shape)}")
    m = _as_mask(mask, gen.shape)
    if m.dtype == torch.bool:
        out = torch.where(m, gen.clamp(-1, 1), orig)
    else:
        m = m.to(gen.dtype)
        out = (m * gen + (1 - m) * orig).clamp(-1, 1)
    return out.numpy() if isinstance(generated, np.ndarray) else out


@torch.no_grad()
def edit_frame(original, mask, previous, identity, z, model: ConditionedUNet, schedule: NoiseSchedule, seed: int):
    """Denoise the masked region of ``original`` from pure noise through every step of ``schedule``.

    Unmasked pixels are reset to the original after every step so the model
    always sees exact context. Returns a [3, S, S] float32 array.
    """
    cfg = model.config
    orig = torch.as_tensor(np.asarray(original), dtype=torch.float32)
    prev = torch.as_tensor(np.asarray(previous), dtype=torch.float32)
    ident = torch.as_tensor(np.asarray(identity), dtype=torch.float32)
    audio = torch.as_tensor(np.asarray(z), dtype=torch.float32)[None]
    if orig.shape[-1] != cfg.image_size:
        raise ValueError(f"frame size {orig.shape[-1]} does not match model image_size {cfg.image_size}")
    m = _as_mask(mask, orig.shape).bool()
    gen = torch.Generator().manual_seed(int(seed))
    model.eval()

    y = torch.where(m, torch.randn(orig.shape, generator=gen), orig)
    for k in reversed(range(schedule.num_steps)):
        x = assemble_input(y[None], prev[None], ident[None], m[None], cfg.include_mask_channel)
        eps_hat = model(x, audio, float(schedule.alpha_bars[k]))[0]
        noise = torch.randn(orig.shape, generator=gen) if k > 0 else None
        y = torch.where(m, reverse_step(y, eps_hat, k, schedule, noise), orig)
    return composite(y, orig, m).numpy()


def dub_frames(frames, masks, windows, model, schedule: NoiseSchedule, seed: int, on_frame=None) -> DubResult:
    """Core autoregressive loop over precomputed audio windows.

    Frame 0 passes through unedited and is the identity frame; frame i is
    conditioned on the generated frame i-1.
    """
    frames = np.asarray(frames, dtype=np.float32)
    out = np.empty_like(frames)
    out[0] = frames[0]
    seconds = [0.0]
    for i in range(1, len(frames)):
        t0 = time.perf_counter()
        try:
            out[i] = edit_frame(frames[i], masks[i], out[i - 1], frames[0], windows[i], model, schedule, frame_seed(seed, i))
        except Exception as exc:
            raise RuntimeError(f"dubbing failed at frame {i}: {exc}") from exc
        seconds.append(time.perf_counter() - t0)
        if on_frame is not None:
            on_frame(i, out[i])
    return DubResult(out, seconds, schedule.num_steps, seed)


def audio_windows(audio: Waveform, n_frames: int, stats: FeatureStats) -> np.ndarray:
    """Normalized [n_frames, 5, 256] conditioning windows; audio longer than the clip is trimmed."""
    needed = n_frames / FPS
    tolerance = 0.5 / FPS
    if audio.duration + tolerance < needed:
        raise ValueError(f"audio lasts {audio.duration:.3f}s but the clip needs {needed:.3f}s")
    audio = resample_to_16k(audio)
    trimmed = Waveform(audio.samples[: int(round(needed * audio.sample_rate))], audio.sample_rate)
    return all_windows(compute_mel(trimmed).normalized(stats), n_frames)


def dub_video(req: DubRequest, model: ConditionedUNet, schedule: NoiseSchedule, stats: FeatureStats,
              on_frame=None) -> DubResult:
    frames = np.asarray(req.frames)
    if len(frames) != len(req.masks):
        raise ValueError("need exactly one mask per frame")
    windows = audio_windows(req.audio, len(frames), stats)
    sched = resolve_steps(schedule, req.inference_steps)
    return dub_frames(frames, req.masks, windows, model, sched, req.seed, on_frame)


def write_dub_output(out_dir, result: DubResult, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    save_frames(out_dir / "frames", result.frames)
    write_json(
        out_dir / "result.json",
        {
            "n_frames": len(result.frames),
            "steps": result.steps,
            "seed": result.seed,
            "frame_seconds": [round(s, 6) for s in result.frame_seconds],
            **(extra or {}),
        },
    )
    return out_dir
