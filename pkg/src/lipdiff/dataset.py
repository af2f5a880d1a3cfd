"""Clip directories and manifests: loading, preprocessing, and training-pair batching.

Clip layout::

    clip_dir/frames/%06d.png   clip_dir/audio.wav   clip_dir/landmarks.json   clip_dir/meta.json
    clip_dir/features.bin      (optional mel cache written by ``preprocess_dataset``)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .audiofeat import FPS, FeatureStats, MelSpectrogram, Waveform, all_windows, compute_mel, compute_stats, resample_to_16k
from .io import DataError, load_frames, read_features, read_json, read_wav, save_frames, write_features, write_json, write_wav
from .videoprep import compute_mask, crop_clip, interpolate_landmarks

log = logging.getLogger(__name__)

FEATURE_FILE = "features.bin"


@dataclass
class ClipData:
    name: str
    frames: np.ndarray  # [N, 3, S, S] float32
    windows: np.ndarray  # [N, 5, 256] float32, normalized
    masks: np.ndarray  # [N, S, S] bool
    landmarks: list
    meta: dict = field(default_factory=dict)
    audio: Waveform | None = None

    def __len__(self):
        return len(self.frames)


def load_manifest(root) -> dict:
    root = Path(root)
    manifest = read_json(root / "manifest.json")
    if not manifest.get("clips"):
        raise DataError(f"manifest in {root} lists no clips")
    return manifest


def clip_dirs(root, split: str | None = None) -> list[Path]:
    root = Path(root)
    manifest = load_manifest(root)
    return [root / c["path"] for c in manifest["clips"] if split is None or c["split"] == split]


def raw_spectrogram(clip_dir) -> MelSpectrogram:
    """Unnormalized log-mel of the clip audio (recomputed from the WAV, never from the cache)."""
    return compute_mel(resample_to_16k(read_wav(Path(clip_dir) / "audio.wav")))


def clip_spectrogram(clip_dir, stats: FeatureStats) -> MelSpectrogram:
    cache = Path(clip_dir) / FEATURE_FILE
    if cache.exists():
        spec = read_features(cache)
        if spec.stats is not None and np.allclose(spec.stats.mean, stats.mean) and np.allclose(spec.stats.std, stats.std):
            return spec
    return raw_spectrogram(clip_dir).normalized(stats)


def masks_from_landmarks(landmarks, image_size: int) -> np.ndarray:
    filled = interpolate_landmarks(landmarks)
    return np.stack([compute_mask(lm, image_size).to_array(image_size, image_size) for lm in filled])


def load_clip(clip_dir, stats: FeatureStats) -> ClipData:
    clip_dir = Path(clip_dir)
    frames = load_frames(clip_dir / "frames")
    landmarks = read_json(clip_dir / "landmarks.json")
    if len(landmarks) != len(frames):
        raise DataError(f"{clip_dir}: {len(landmarks)} landmark sets for {len(frames)} frames")
    meta = read_json(clip_dir / "meta.json") if (clip_dir / "meta.json").exists() else {}
    if int(meta.get("fps", FPS)) != FPS:
        raise DataError(f"{clip_dir}: expected {FPS} fps, got {meta['fps']}; run preprocess first")
    spec = clip_spectrogram(clip_dir, stats)
    audio = read_wav(clip_dir / "audio.wav")
    return ClipData(
        clip_dir.name,
        frames,
        all_windows(spec, len(frames)),
        masks_from_landmarks(landmarks, frames.shape[-1]),
        landmarks,
        meta,
        audio,
    )


def dataset_stats(root) -> FeatureStats:
    """Stored stats from the manifest, else computed over the training split."""
    manifest = load_manifest(root)
    if manifest.get("feature_stats"):
        return FeatureStats.from_dict(manifest["feature_stats"])
    dirs = clip_dirs(root, "train") or clip_dirs(root)
    return compute_stats([raw_spectrogram(d) for d in dirs])


def load_split(root, split: str | None = "train", stats: FeatureStats | None = None):
    """(clips, stats) for one split of a dataset."""
    stats = stats if stats is not None else dataset_stats(root)
    dirs = clip_dirs(root, split)
    if not dirs:
        raise DataError(f"no clips with split {split!r} in {root}")
    return [load_clip(d, stats) for d in dirs], stats


class TrainingPairs:
    """All (clip, frame index >= 1) targets; frame 0 only ever serves as the identity frame."""

    def __init__(self, clips: list[ClipData]):
        self.clips = clips
        self.pairs = [(c, i) for c in range(len(clips)) for i in range(1, len(clips[c]))]
        if not self.pairs:
            raise DataError("dataset has no trainable frames (every clip needs at least 2 frames)")

    def __len__(self):
        return len(self.pairs)

    def batch(self, indices) -> dict:
        cur, prev, ident, audio, masks, ids = [], [], [], [], [], []
        for k in indices:
            c, i = self.pairs[int(k)]
            clip = self.clips[c]
            cur.append(clip.frames[i])
            prev.append(clip.frames[i - 1])
            ident.append(clip.frames[0])
            audio.append(clip.windows[i])
            masks.append(clip.masks[i])
            ids.append(f"{clip.name}:{i}")
        return {
            "frame": torch.from_numpy(np.stack(cur)),
            "previous": torch.from_numpy(np.stack(prev)),
            "identity": torch.from_numpy(np.stack(ident)),
            "audio": torch.from_numpy(np.stack(audio)),
            "mask": torch.from_numpy(np.stack(masks))[:, None],
            "ids": ids,
        }


def resample_frame_rate(frames: np.ndarray, src_fps: float, dst_fps: int = FPS) -> np.ndarray:
    """Nearest-in-time frame selection onto a ``dst_fps`` grid."""
    if src_fps == dst_fps:
        return frames
    n_out = max(1, int(round(len(frames) * dst_fps / src_fps)))
    idx = np.minimum(np.round(np.arange(n_out) * src_fps / dst_fps).astype(int), len(frames) - 1)
    return frames[idx]


def preprocess_dataset(src_root, dst_root, image_size: int = 128) -> dict:
    """Crop/resize every clip to ``image_size``, resample audio to 16 kHz and cache normalized mel features."""
    src_root, dst_root = Path(src_root), Path(dst_root)
    manifest = load_manifest(src_root)
    raw = {}
    for entry in manifest["clips"]:
        src, dst = src_root / entry["path"], dst_root / entry["path"]
        frames = load_frames(src / "frames")
        landmarks = read_json(src / "landmarks.json")
        meta = read_json(src / "meta.json") if (src / "meta.json").exists() else {}
        fps = float(meta.get("fps", FPS))
        if fps != FPS:
            keep = resample_frame_rate(np.arange(len(frames)), fps)
            frames, landmarks = frames[keep], [landmarks[k] for k in keep]
        cropped, moved, boxes = crop_clip(frames, landmarks, image_size)
        save_frames(dst / "frames", cropped)
        write_json(dst / "landmarks.json", moved)
        audio = resample_to_16k(read_wav(src / "audio.wav"))
        write_wav(dst / "audio.wav", audio)
        audio = read_wav(dst / "audio.wav")
        write_json(dst / "meta.json", {**meta, "fps": FPS, "n_frames": len(cropped), "image_size": image_size,
                                        "crop_boxes": boxes.tolist()})
        raw[entry["path"]] = compute_mel(audio)
        log.info("preprocessed %s (%d frames)", entry["path"], len(cropped))

    train = [raw[c["path"]] for c in manifest["clips"] if c["split"] == "train"] or list(raw.values())
    stats = compute_stats(train)
    for path, spec in raw.items():
        write_features(dst_root / path / FEATURE_FILE, spec.normalized(stats))
    out = {**manifest, "image_size": image_size, "feature_stats": stats.to_dict()}
    write_json(dst_root / "manifest.json", out)
    return out
