"""Procedural talking-sprite dataset whose mouth opening is a known function of the audio.

Every clip carries its ground truth: the per-frame aperture is the RMS of the
40 ms of audio centred on the frame time, and the rendered mouth height is
exactly that aperture times 20% of the image height.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audiofeat import FPS, SAMPLE_RATE, Waveform
from .io import fingerprint, quantize_pcm16, save_frames, write_json, write_wav

# normalized layout (x right, y down)
NOSE_TIP = (0.5, 0.5)
MOUTH_CENTER = (0.5, 0.7)
MOUTH_HALF_WIDTH = 0.15
MOUTH_MAX_HALF_HEIGHT = 0.10
LIP_HALF_THICKNESS = 0.015
JAW_LEFT = (0.15, 0.75)
JAW_RIGHT = (0.85, 0.75)
CHIN = (0.5, 0.9)
EYES = ((0.33, 0.36), (0.67, 0.36))
EYE_RADIUS = 0.06
SKIN_REFERENCE = (0.25, 0.53)  # flat skin, outside any mask

INTERIOR_COLOR = np.array([0.22, 0.04, 0.08])
APERTURE_RMS_SCALE = 0.7

_SKIN_LEVELS = 0.45 + np.arange(7) * (16 / 255)
_LIP_OFFSET = 0.12


@dataclass(frozen=True)
class SpriteIdentity:
    """Rendering parameters derived deterministically from ``seed``.

    Face colours sit on a 16/255 lattice and seeds map to it bijectively modulo
    343, so two distinct seeds in that range always differ by at least one step.
    """

    seed: int

    @property
    def face_color(self) -> np.ndarray:
        idx = (self.seed * 97 + 13) % 343
        return _SKIN_LEVELS[[idx // 49, (idx // 7) % 7, idx % 7]]

    @property
    def eye_color(self) -> np.ndarray:
        return np.random.default_rng([self.seed, 1]).uniform(0.0, 0.35, 3)

    @property
    def hair_color(self) -> np.ndarray:
        return np.random.default_rng([self.seed, 2]).uniform(0.05, 0.4, 3)

    @property
    def texture_phase(self) -> float:
        return float(np.random.default_rng([self.seed, 3]).uniform(0, 2 * math.pi))

    @property
    def lip_color(self) -> np.ndarray:
        """Skin shifted orthogonally to the skin->interior axis, invisible to the aperture projection."""
        skin = self.face_color
        d = INTERIOR_COLOR - skin
        u = np.cross(d, np.ones(3))
        if np.linalg.norm(u) < 1e-9:
            u = np.cross(d, np.array([1.0, 0.0, 0.0]))
        return skin + _LIP_OFFSET * u / np.linalg.norm(u)


@dataclass
class SyntheticClip:
    identity: SpriteIdentity
    frames: np.ndarray  # [N, 3, S, S] in [-1, 1]
    audio: Waveform
    apertures: np.ndarray
    landmarks: list

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def rms(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x))) if len(x) else 0.0


def synth_audio(seed: int, duration_s: float, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """A few seeded sinusoids gated by speech-like bursts separated by exact silence."""
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng([seed, 101])
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    k = int(rng.integers(2, 5))
    freqs = rng.uniform(120, 800, k)
    amps = rng.uniform(0.3, 1.0, k)
    phases = rng.uniform(0, 2 * math.pi, k)
    carrier = (amps[:, None] * np.sin(2 * math.pi * freqs[:, None] * t[None, :] + phases[:, None])).sum(0)
    carrier *= 0.9 / np.max(np.abs(carrier))

    knots_t, knots_v = [0.0], [0.0]
    pos = 0.0
    speaking = bool(rng.integers(0, 2))
    while pos < duration_s:
        if speaking:
            length = rng.uniform(0.2, 0.6)
            inner = np.sort(rng.uniform(pos, pos + length, max(1, int(length / 0.1))))
            knots_t += [pos, *inner, pos + length]
            knots_v += [0.0, *rng.uniform(0.3, 1.0, len(inner)), 0.0]
        else:
            length = rng.uniform(0.1, 0.4)
        pos += length
        speaking = not speaking
    envelope = np.interp(t, knots_t, knots_v)
    return Waveform(carrier * envelope, sample_rate)


def _window_rms(w: Waveform, i: int, fps: int) -> float:
    """RMS of the zero-padded 40 ms window centred on frame time i / fps."""
    center = int(round(i * w.sample_rate / fps))
    half = int(round(0.02 * w.sample_rate))
    lo, hi = center - half, center + half
    seg = np.zeros(hi - lo)
    a, b = max(lo, 0), min(hi, len(w.samples))
    if b > a:
        seg[a - lo : b - lo] = w.samples[a:b]
    return rms(seg)


def aperture_from_audio(w: Waveform, i: int, fps: int = FPS) -> float:
    """Windowed RMS at frame ``i`` over 0.7, clamped to [0, 1]."""
    return float(min(1.0, _window_rms(w, i, fps) / APERTURE_RMS_SCALE))


def audio_envelope(w: Waveform, n_frames: int, fps: int = FPS) -> np.ndarray:
    """Per-frame windowed RMS (the unclamped, unscaled aperture signal)."""
    return np.array([_window_rms(w, i, fps) for i in range(n_frames)])


def _vertical_coverage(size: int, cy: float, half_heights: np.ndarray) -> np.ndarray:
    """Per-pixel fraction of rows [r, r+1) inside [cy - h, cy + h], per column; [size, size]."""
    r = np.arange(size, dtype=np.float64)[:, None]
    top, bottom = cy - half_heights[None, :], cy + half_heights[None, :]
    return np.clip(np.minimum(r + 1, bottom) - np.maximum(r, top), 0.0, 1.0)


def render_frame(identity: SpriteIdentity, aperture: float, size: int = 64):
    """Deterministic raster of the sprite; returns ([3, S, S] image in [-1, 1], landmarks).

    Landmarks are (x, y) pixel coordinates, pixel (r, c) covering [c, c+1) x [r, r+1).
    """
    if not 0.0 <= aperture <= 1.0:
        raise ValueError(f"aperture must lie in [0, 1], got {aperture}")
    S = size
    ys, xs = (np.mgrid[0:S, 0:S] + 0.5) / S
    skin = identity.face_color
    img = np.broadcast_to(skin[:, None, None], (3, S, S)).copy()

    forehead = (ys >= 0.12) & (ys < 0.3)
    shade = 1.0 + 0.06 * np.sin(2 * math.pi * 4 * xs + identity.texture_phase)
    img = np.where(forehead[None], img * shade[None], img)
    img = np.where((ys < 0.12)[None], identity.hair_color[:, None, None], img)
    for ex, ey in EYES:
        eye = (xs - ex) ** 2 + (ys - ey) ** 2 <= EYE_RADIUS**2
        img = np.where(eye[None], identity.eye_color[:, None, None], img)
    nose = (ys >= 0.38) & (ys < NOSE_TIP[1]) & (np.abs(xs - NOSE_TIP[0]) <= 0.03 + 0.25 * (ys - 0.38))
    img = np.where(nose[None], (skin * 0.85)[:, None, None], img)

    cx, cy = MOUTH_CENTER[0] * S, MOUTH_CENTER[1] * S
    a = MOUTH_HALF_WIDTH * S
    col_x = np.arange(S) + 0.5
    inside = np.abs(col_x - cx) <= a
    lip_cov = _vertical_coverage(S, cy, np.where(inside, LIP_HALF_THICKNESS * S, 0.0))
    shape = np.sqrt(np.clip(1.0 - ((col_x - cx) / a) ** 2, 0.0, None))
    open_cov = _vertical_coverage(S, cy, aperture * MOUTH_MAX_HALF_HEIGHT * S * shape)
    img = img + lip_cov[None] * (identity.lip_color[:, None, None] - img)
    img = img + open_cov[None] * (INTERIOR_COLOR[:, None, None] - img)

    landmarks = {
        "nose_tip": [NOSE_TIP[0] * S, NOSE_TIP[1] * S],
        "jaw_left": [JAW_LEFT[0] * S, JAW_LEFT[1] * S],
        "jaw_right": [JAW_RIGHT[0] * S, JAW_RIGHT[1] * S],
        "chin": [CHIN[0] * S, CHIN[1] * S],
        "mouth_left": [(MOUTH_CENTER[0] - MOUTH_HALF_WIDTH) * S, cy],
        "mouth_right": [(MOUTH_CENTER[0] + MOUTH_HALF_WIDTH) * S, cy],
    }
    return (img * 2.0 - 1.0).astype(np.float32), landmarks


def measure_aperture(image: np.ndarray) -> float:
    """Recover the aperture from a rendered (or generated) sprite frame.

    Projects the centre columns onto the skin->interior colour axis, sums the
    per-row coverage and divides by the full-open height at that column.
    """
    image = np.asarray(image, dtype=np.float64)
    S = image.shape[-1]
    unit = (image + 1.0) / 2.0
    skin = unit[:, int(SKIN_REFERENCE[1] * S), int(SKIN_REFERENCE[0] * S)]
    d = INTERIOR_COLOR - skin
    cx, cy = MOUTH_CENTER[0] * S, MOUTH_CENTER[1] * S
    a = MOUTH_HALF_WIDTH * S
    r0 = max(0, int(math.floor(cy - MOUTH_MAX_HALF_HEIGHT * S)) - 1)
    r1 = min(S, int(math.ceil(cy + MOUTH_MAX_HALF_HEIGHT * S)) + 1)
    cols = [S // 2 - 1, S // 2] if S % 2 == 0 else [S // 2]
    estimates = []
    for c in cols:
        cov = np.einsum("cr,c->r", unit[:, r0:r1, c] - skin[:, None], d) / float(d @ d)
        factor = math.sqrt(max(0.0, 1.0 - ((c + 0.5 - cx) / a) ** 2))
        estimates.append(cov.sum() / (2 * MOUTH_MAX_HALF_HEIGHT * S * factor))
    return float(np.clip(np.mean(estimates), 0.0, 1.0))


def measure_apertures(frames) -> np.ndarray:
    return np.array([measure_aperture(f) for f in frames])


def make_clip(identity: SpriteIdentity, audio_seed: int, duration_s: float, size: int = 64) -> SyntheticClip:
    """Render a clip; audio is PCM16-quantized first so stored files reproduce every aperture."""
    audio = synth_audio(audio_seed, duration_s)
    audio = Waveform(quantize_pcm16(audio.samples), audio.sample_rate)
    n = int(round(duration_s * FPS))
    apertures = np.array([aperture_from_audio(audio, i) for i in range(n)])
    frames, landmarks = [], []
    for ap in apertures:
        img, lm = render_frame(identity, float(ap), size)
        frames.append(img)
        landmarks.append(lm)
    return SyntheticClip(identity, np.stack(frames), audio, apertures, landmarks)


def write_clip(clip: SyntheticClip, clip_dir, split: str, extra_meta: dict | None = None):
    """Write the standard clip layout: frames/, audio.wav, landmarks.json, meta.json."""
    clip_dir = Path(clip_dir)
    try:
        save_frames(clip_dir / "frames", clip.frames)
        write_wav(clip_dir / "audio.wav", clip.audio)
        write_json(clip_dir / "landmarks.json", clip.landmarks)
        meta = {
            "fps": FPS,
            "identity": f"id{clip.identity.seed}",
            "split": split,
            "n_frames": clip.n_frames,
            "image_size": int(clip.frames.shape[-1]),
            "apertures": [float(a) for a in clip.apertures],
            **(extra_meta or {}),
        }
        write_json(clip_dir / "meta.json", meta)
    except OSError as exc:
        raise OSError(f"failed writing synthetic clip to {clip_dir}: {exc}") from exc


def make_dataset(
    n_identities: int,
    clips_per_identity: int,
    duration_s: float,
    image_size: int,
    out_dir,
    seed: int = 0,
    n_holdout: int = 1,
) -> dict:
    """Write a synthetic dataset plus ``manifest.json``; the last ``n_holdout`` identities are the test split."""
    if n_identities < 1 or clips_per_identity < 1:
        raise ValueError("need at least one identity and one clip")
    if n_identities == 1:
        n_holdout = 0
    elif not 0 <= n_holdout < n_identities:
        raise ValueError(f"n_holdout must lie in [0, {n_identities}), got {n_holdout}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clips = []
    for k in range(n_identities):
        identity = SpriteIdentity(seed * 31 + k)
        split = "test" if k >= n_identities - n_holdout else "train"
        for j in range(clips_per_identity):
            name = f"id{k:02d}_c{j:03d}"
            audio_seed = int(np.random.SeedSequence([seed, k, j]).generate_state(1)[0])
            clip = make_clip(identity, audio_seed, duration_s, image_size)
            write_clip(clip, out_dir / "clips" / name, split, {"audio_seed": audio_seed, "dataset_seed": seed})
            clips.append({"name": name, "path": f"clips/{name}", "identity": f"id{identity.seed}", "split": split})
    manifest = {
        "dataset_seed": seed,
        "fps": FPS,
        "image_size": image_size,
        "duration_s": duration_s,
        "n_identities": n_identities,
        "clips_per_identity": clips_per_identity,
        "n_holdout": n_holdout,
        "clips": clips,
    }
    manifest["fingerprint"] = fingerprint({k: v for k, v in manifest.items() if k != "clips"})
    write_json(out_dir / "manifest.json", manifest)
    return manifest
