"""Face crops, lower-face masks and the stacked conditioning input.

Frames are channel-first arrays, [3, H, W] (or [N, 3, H, W] for a clip), with
values in [-1, 1]. Landmarks are dicts mapping point names to (x, y) pixel
coordinates; a missing frame is ``None``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import uniform_filter1d

from .io import DataError, read_json
from .schedule import NoiseSchedule, q_sample

REFERENCE_SIZE = 128
CROP_SCALE = 2.2
SMOOTHING_WINDOW = 7
MAX_MISSING_FRACTION = 0.10
# mask geometry: fractions of the crop; the nose gap is 8 px at 128 px
MASK_X_MARGIN = 0.05
MASK_NOSE_GAP = 8 / REFERENCE_SIZE
MASK_CHIN_MARGIN = 0.10
MASK_MIN_Y0 = 0.4


class UnprocessableClipError(DataError):
    pass


class UnprocessableFrameError(DataError):
    pass


@dataclass
class FrameSequence:
    frames: np.ndarray  # [N, 3, H, W]
    fps: int = 25

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3 or len(self.frames) < 1:
            raise ValueError(f"expected [N, 3, H, W] frames with N >= 1, got {self.frames.shape}")

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]


class LandmarkProvider(Protocol):
    def landmarks(self, seq: FrameSequence) -> list[dict | None]:
        """One landmark dict (or None when the face was not found) per frame."""


class StaticLandmarks:
    """Landmarks known ahead of time, e.g. from ``landmarks.json`` or the sprite renderer."""

    def __init__(self, points: Sequence[dict | None]):
        self.points = list(points)

    @classmethod
    def from_file(cls, path) -> "StaticLandmarks":
        return cls(read_json(path))

    def landmarks(self, seq: FrameSequence) -> list[dict | None]:
        if len(self.points) != len(seq):
            raise UnprocessableClipError(f"{len(self.points)} landmark sets for {len(seq)} frames")
        return self.points


@dataclass(frozen=True)
class MaskSpec:
    """Axis-aligned rectangle in normalized crop coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 <= 1 and 0 <= self.y0 < self.y1 <= 1):
            raise ValueError(f"invalid mask rectangle {self}")
        if self.y0 < MASK_MIN_Y0:
            raise ValueError(f"mask must lie in the lower face (y0 >= {MASK_MIN_Y0}), got y0={self.y0}")

    def pixel_box(self, height: int, width: int) -> tuple[int, int, int, int]:
        """(row0, row1, col0, col1), half-open, covering every pixel the rectangle touches."""
        r0 = int(np.floor(self.y0 * height + 1e-9))
        r1 = int(np.ceil(self.y1 * height - 1e-9))
        c0 = int(np.floor(self.x0 * width + 1e-9))
        c1 = int(np.ceil(self.x1 * width - 1e-9))
        return r0, max(r1, r0 + 1), c0, max(c1, c0 + 1)

    def to_array(self, height: int, width: int) -> np.ndarray:
        r0, r1, c0, c1 = self.pixel_box(height, width)
        m = np.zeros((height, width), dtype=bool)
        m[r0:r1, c0:c1] = True
        return m

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def to_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1}


def compute_mask(landmarks: dict, image_size: int = REFERENCE_SIZE) -> MaskSpec:
    """Rectangle from just below the nose to past the chin, spanning the jaw.

    ``landmarks`` are pixel coordinates in an ``image_size`` square crop.
    """
    try:
        nose_y = landmarks["nose_tip"][1] / image_size
        chin_y = landmarks["chin"][1] / image_size
        jx = sorted([landmarks["jaw_left"][0] / image_size, landmarks["jaw_right"][0] / image_size])
    except (KeyError, TypeError, IndexError) as exc:
        raise UnprocessableFrameError(f"missing landmark: {exc}") from exc
    if jx[1] - jx[0] < 1e-6:
        raise UnprocessableFrameError("degenerate landmarks: zero jaw width")
    x0 = max(0.0, jx[0] - MASK_X_MARGIN)
    x1 = min(1.0, jx[1] + MASK_X_MARGIN)
    y0 = max(0.0, nose_y + MASK_NOSE_GAP)
    y1 = min(1.0, chin_y + MASK_CHIN_MARGIN)
    if y0 < MASK_MIN_Y0 or y1 <= y0:
        raise UnprocessableFrameError(f"landmarks give an unusable mask (nose {nose_y:.3f}, chin {chin_y:.3f})")
    return MaskSpec(x0, y0, x1, y1)


def interpolate_landmarks(points: Sequence[dict | None]) -> list[dict]:
    """Fill missing frames by linear interpolation (nearest value at the ends)."""
    n = len(points)
    present = [i for i, p in enumerate(points) if p]
    if not present:
        raise UnprocessableClipError("no landmarks detected on any frame")
    if (n - len(present)) / n > MAX_MISSING_FRACTION:
        raise UnprocessableClipError(f"landmarks missing on {n - len(present)} of {n} frames")
    names = sorted(points[present[0]])
    out = []
    for i in range(n):
        if points[i]:
            out.append({k: [float(v) for v in points[i][k]] for k in names})
            continue
        filled = {}
        for k in names:
            xs = np.interp(i, present, [points[j][k][0] for j in present])
            ys = np.interp(i, present, [points[j][k][1] for j in present])
            filled[k] = [float(xs), float(ys)]
        out.append(filled)
    return out


def crop_boxes(landmarks: Sequence[dict], frame_hw: tuple[int, int]) -> np.ndarray:
    """Integer square boxes [N, 3] of (left, top, side), smoothed over 7 frames and kept inside the frame."""
    H, W = frame_hw
    centers = smoothed_centers(landmarks)
    sides = np.array(
        [CROP_SCALE * abs(lm["jaw_right"][0] - lm["jaw_left"][0]) for lm in landmarks], dtype=np.float64
    )
    if len(landmarks) > 1:
        sides = uniform_filter1d(sides, SMOOTHING_WINDOW, mode="nearest")
    sides = np.minimum(np.round(sides), min(H, W)).astype(int)
    lefts = np.clip(np.round(centers[:, 0] - sides / 2), 0, W - sides).astype(int)
    tops = np.clip(np.round(centers[:, 1] - sides / 2), 0, H - sides).astype(int)
    return np.stack([lefts, tops, sides], axis=1)


def smoothed_centers(landmarks: Sequence[dict]) -> np.ndarray:
    centers = np.array([np.array(list(lm.values()), dtype=np.float64).mean(axis=0) for lm in landmarks])
    if len(landmarks) == 1:
        return centers
    return uniform_filter1d(centers, SMOOTHING_WINDOW, axis=0, mode="nearest")


def _resize(patch: np.ndarray, size: int) -> np.ndarray:
    if patch.shape[-1] == size and patch.shape[-2] == size:
        return patch.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(patch, dtype=np.float32))[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=patch.shape[-1] > size)
    return out[0].clamp(-1, 1).numpy()


def crop_clip(frames: np.ndarray, landmarks: Sequence[dict | None], size: int = REFERENCE_SIZE):
    """Crop and resize every frame; returns (frames [N,3,size,size], landmarks in crop pixels, boxes)."""
    filled = interpolate_landmarks(landmarks)
    boxes = crop_boxes(filled, frames.shape[-2:])
    out, moved = [], []
    for frame, lm, (left, top, side) in zip(frames, filled, boxes):
        out.append(_resize(frame[:, top : top + side, left : left + side], size))
        scale = size / side
        moved.append({k: [(x - left) * scale, (y - top) * scale] for k, (x, y) in lm.items()})
    return np.stack(out), moved, boxes


def crop_align(seq: FrameSequence, provider: LandmarkProvider, size: int = REFERENCE_SIZE) -> FrameSequence:
    frames, _, _ = crop_clip(seq.frames, provider.landmarks(seq), size)
    return FrameSequence(frames, seq.fps)


def _mask_like(mask, like):
    """Boolean mask broadcastable against ``like`` (numpy or torch)."""
    if isinstance(mask, MaskSpec):
        mask = mask.to_array(like.shape[-2], like.shape[-1])
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(mask, device=like.device).bool()
    return np.asarray(mask).astype(bool)


def _where(mask, a, b):
    if isinstance(a, torch.Tensor):
        return torch.where(mask, a, b)
    return np.where(mask, a, b)


def apply_forward_noise(frame, mask, t, eps, schedule: NoiseSchedule):
    """Noise only the masked pixels to step ``t``; every other pixel is returned untouched."""
    noisy = q_sample(frame, t, eps, schedule)
    return _where(_mask_like(mask, frame), noisy, frame)


def assemble_input(noisy_masked, previous, identity, mask=None, include_mask_channel: bool = False):
    """Channel stack [noisy(3), previous(3), identity(3), mask(0|1)] along the channel axis."""
    shapes = {tuple(x.shape) for x in (noisy_masked, previous, identity)}
    if len(shapes) != 1:
        raise ValueError(f"conditioning images differ in shape: {sorted(shapes)}")
    if noisy_masked.shape[-3] != 3:
        raise ValueError(f"expected 3-channel images, got shape {tuple(noisy_masked.shape)}")
    parts = [noisy_masked, previous, identity]
    torch_mode = isinstance(noisy_masked, torch.Tensor)
    if include_mask_channel:
        if mask is None:
            raise ValueError("include_mask_channel requires a mask")
        m = _mask_like(mask, noisy_masked)
        if m.ndim == 2:
            m = m[None]
        target = tuple(noisy_masked.shape[:-3]) + (1,) + tuple(noisy_masked.shape[-2:])
        if torch_mode:
            m = m.to(noisy_masked.dtype).expand(target)
        else:
            m = np.broadcast_to(m, target).astype(noisy_masked.dtype)
        parts.append(m)
    if torch_mode:
        return torch.cat(parts, dim=-3)
    return np.concatenate(parts, axis=-3)
