"""File formats: WAV audio, PNG frame directories, JSON, and the mel feature cache."""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.io import wavfile

from .audiofeat import FeatureStats, MelSpectrogram, Waveform, silence_frame

PCM_SCALE = 32767.0
FEATURE_MAGIC = b"LDMEL1\n"


class DataError(Exception):
    """A dataset file is missing or malformed."""


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    """The exact values a 16-bit WAV round trip produces."""
    return np.round(np.clip(samples, -1.0, 1.0) * PCM_SCALE) / PCM_SCALE


def write_wav(path, w: Waveform):
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * PCM_SCALE).astype("<i2")
    wavfile.write(str(path), w.sample_rate, pcm)


def read_wav(path) -> Waveform:
    """Mono float waveform; multichannel input is averaged."""
    try:
        sr, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read WAV {path}: {exc}") from exc
    if np.issubdtype(data.dtype, np.integer):
        if data.dtype == np.int16:
            data = data.astype(np.float64) / PCM_SCALE
        else:
            data = data.astype(np.float64) / float(np.iinfo(data.dtype).max)
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return Waveform(data, int(sr))


def to_uint8(frame: np.ndarray) -> np.ndarray:
    """[3, H, W] in [-1, 1] -> [H, W, 3] uint8."""
    return np.clip(np.round((np.asarray(frame, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    """[H, W, 3] uint8 -> [3, H, W] float32 in [-1, 1]."""
    return (pixels.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1).copy()


def quantize_frames(frames: np.ndarray) -> np.ndarray:
    """Frames as they come back from an 8-bit PNG round trip."""
    frames = np.asarray(frames)
    if frames.ndim == 3:
        return from_uint8(to_uint8(frames))
    return np.stack([from_uint8(to_uint8(f)) for f in frames])


def save_frames(directory, frames) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        p = directory / f"{i:06d}.png"
        Image.fromarray(to_uint8(frame)).save(p, format="PNG", optimize=False)
        paths.append(p)
    return paths


def load_frames(directory) -> np.ndarray:
    """All ``%06d.png`` frames of a directory, [N, 3, H, W] float32."""
    directory = Path(directory)
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise DataError(f"no PNG frames in {directory}")
    frames = []
    for p in paths:
        with Image.open(p) as im:
            frames.append(from_uint8(np.asarray(im.convert("RGB"))))
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise DataError(f"frames in {directory} have differing shapes {sorted(shapes)}")
    return np.stack(frames)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read JSON {path}: {exc}") from exc


def fingerprint(obj) -> str:
    """Short content hash of a JSON-serializable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def feature_params() -> dict:
    from . import audiofeat as af

    return {
        "sample_rate": af.SAMPLE_RATE,
        "n_fft": af.N_FFT,
        "win_length": af.WIN_LENGTH,
        "hop_length": af.HOP_LENGTH,
        "n_mels": af.N_MELS,
        "log_floor": af.LOG_FLOOR,
        "mel_scale": "htk",
    }


def write_features(path, spec: MelSpectrogram):
    """Magic line, uint32 header length, JSON header, then little-endian float32 rows."""
    header = {
        "shape": list(spec.frames.shape),
        "dtype": "<f4",
        "stats": spec.stats.to_dict() if spec.stats is not None else None,
        "fingerprint": fingerprint(feature_params()),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(spec.frames, dtype="<f4").tobytes())


def read_features(path) -> MelSpectrogram:
    with open(path, "rb") as fh:
        if fh.read(len(FEATURE_MAGIC)) != FEATURE_MAGIC:
            raise DataError(f"{path} is not a feature cache file")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        if header["fingerprint"] != fingerprint(feature_params()):
            raise DataError(f"{path} was computed with different feature parameters")
        rows, cols = header["shape"]
        frames = np.frombuffer(fh.read(rows * cols * 4), dtype="<f4").reshape(rows, cols).astype(np.float64)
    stats = FeatureStats.from_dict(header["stats"]) if header["stats"] else None
    silence = silence_frame()
    if stats is not None:
        silence = (silence - stats.mean) / stats.std
    return MelSpectrogram(frames, silence, stats=stats)
