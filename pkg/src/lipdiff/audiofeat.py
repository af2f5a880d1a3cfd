"""Speech waveform -> log-mel features aligned 2:1 to 25 fps video frames."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from scipy.signal import get_window, resample_poly

SAMPLE_RATE = 16000
N_FFT = 2048
WIN_LENGTH = 640
HOP_LENGTH = 320
N_MELS = 256
LOG_FLOOR = 1e-5
WINDOW_ROWS = 5
FPS = 25


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class FeatureStats:
    """Per-band mean/std used to z-normalize log-mel features."""

    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))

    @classmethod
    def identity(cls) -> "FeatureStats":
        return cls(np.zeros(N_MELS), np.ones(N_MELS))


@dataclass(frozen=True)
class MelSpectrogram:
    """``frames`` is [N_spec, 256]; row k is centred on time k * hop."""

    frames: np.ndarray
    silence_frame: np.ndarray
    hop_seconds: float = HOP_LENGTH / SAMPLE_RATE
    window_seconds: float = WIN_LENGTH / SAMPLE_RATE
    stats: FeatureStats | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise ValueError(f"mel frames must be [N, {N_MELS}], got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("mel spectrogram needs at least one frame")

    def __len__(self):
        return self.frames.shape[0]

    def normalized(self, stats: FeatureStats) -> "MelSpectrogram":
        if self.stats is not None:
            raise ValueError("spectrogram is already normalized")
        return replace(
            self,
            frames=(self.frames - stats.mean) / stats.std,
            silence_frame=(self.silence_frame - stats.mean) / stats.std,
            stats=stats,
        )


@dataclass(frozen=True)
class AudioWindow:
    values: np.ndarray  # [5, 256]
    center_frame_index: int


def resample_to_16k(w: Waveform) -> Waveform:
    """Polyphase windowed-sinc resampling to 16 kHz."""
    if len(w) == 0:
        raise ValueError("cannot resample an empty waveform")
    if w.sample_rate == SAMPLE_RATE:
        return w
    ratio = Fraction(SAMPLE_RATE, w.sample_rate)
    out = resample_poly(w.samples, ratio.numerator, ratio.denominator, window=("kaiser", 5.0))
    return Waveform(out, SAMPLE_RATE)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = 0.0, fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(
    sr: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS, fmin: float = 0.0, fmax: float | None = None
) -> np.ndarray:
    """HTK-scale triangular filters, shape [n_mels, n_fft // 2 + 1], peak value 1."""
    fmax = sr / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.linspace(0, sr / 2, n_fft // 2 + 1)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lower) / (center - lower)
    falling = (upper - bins) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


_FILTERBANK = None


def _filterbank() -> np.ndarray:
    global _FILTERBANK
    if _FILTERBANK is None:
        _FILTERBANK = mel_filterbank()
        _FILTERBANK.setflags(write=False)
    return _FILTERBANK


def _frame_signal(x: np.ndarray) -> np.ndarray:
    """Windows of WIN_LENGTH samples centred on k*HOP for k < ceil(len/HOP)."""
    n_frames = math.ceil(len(x) / HOP_LENGTH)
    half = WIN_LENGTH // 2
    mode = "reflect" if len(x) > 1 else "constant"
    padded = np.pad(x, (half, half), mode=mode)
    # trailing zeros so the last window always fits
    need = (n_frames - 1) * HOP_LENGTH + WIN_LENGTH
    if len(padded) < need:
        padded = np.pad(padded, (0, need - len(padded)))
    starts = np.arange(n_frames) * HOP_LENGTH
    return padded[starts[:, None] + np.arange(WIN_LENGTH)[None, :]]


def silence_frame() -> np.ndarray:
    return np.full(N_MELS, math.log(LOG_FLOOR))


def compute_mel(w: Waveform) -> MelSpectrogram:
    """Natural-log mel power spectrogram, [ceil(len / 320), 256]."""
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"compute_mel expects {SAMPLE_RATE} Hz audio, got {w.sample_rate}")
    if len(w) == 0:
        raise ValueError("cannot compute features of an empty waveform")
    frames = _frame_signal(w.samples) * get_window("hann", WIN_LENGTH, fftbins=True)
    power = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    mel = power @ _filterbank().T
    return MelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR)), silence_frame())


def compute_stats(specs) -> FeatureStats:
    """Per-band statistics over the rows of several (raw) spectrograms."""
    rows = np.concatenate([s.frames for s in specs], axis=0)
    std = rows.std(axis=0)
    return FeatureStats(rows.mean(axis=0), np.where(std < 1e-6, 1.0, std))


def align_window(spec: MelSpectrogram, i: int, n_frames: int) -> AudioWindow:
    """Rows 2i-2 .. 2i+2 of ``spec``; rows outside the clip are replaced by silence.

    A clip of ``n_frames`` video frames owns spectrogram rows 0 .. 2*(n_frames-1),
    so the first and last frames both get two silence rows.
    """
    if not 0 <= i < n_frames:
        raise ValueError(f"frame index {i} out of range [0, {n_frames})")
    limit = min(len(spec), 2 * n_frames - 1)
    rows = np.arange(2 * i - 2, 2 * i + 3)
    valid = (rows >= 0) & (rows < limit)
    out = np.where(valid[:, None], spec.frames[np.clip(rows, 0, len(spec) - 1)], spec.silence_frame[None, :])
    return AudioWindow(out.astype(np.float32), i)


def all_windows(spec: MelSpectrogram, n_frames: int) -> np.ndarray:
    """Stacked windows for every frame, [n_frames, 5, 256] float32."""
    return np.stack([align_window(spec, i, n_frames).values for i in range(n_frames)])


def frames_for_duration(duration_s: float, fps: int = FPS) -> int:
    return int(round(duration_s * fps))
