"""Region-restricted image quality metrics and the aperture/audio sync proxy.

All image metrics take arrays in [0, 1], shaped [H, W] or [C, H, W]. A region
is a boolean [H, W] map or a MaskSpec; windowed metrics (SSIM, CPBD) use the
region's bounding box, PSNR uses the exact pixels.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import linalg, ndimage

from .audiofeat import Waveform
from .io import write_json
from .synthgen import audio_envelope, measure_apertures
from .videoprep import MaskSpec

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
CPBD_BETA = 3.6
CPBD_BLOCK = 64
CPBD_EDGE_FRACTION = 0.002
CPBD_P_JNB = 1 - np.exp(-1.0)
EDGE_THRESHOLD = 0.2
EDGE_FLOOR = 1e-6
LUMA = np.array([0.299, 0.587, 0.114])
HIST_BINS = 64
POOL_SIZE = 8


class UndefinedCorrelationError(ValueError):
    pass


def to_unit(x) -> np.ndarray:
    """[-1, 1] -> [0, 1]."""
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def region_array(region, shape) -> np.ndarray | None:
    if region is None:
        return None
    h, w = shape[-2:]
    if isinstance(region, MaskSpec):
        return region.to_array(h, w)
    r = np.asarray(region).astype(bool)
    if r.shape != (h, w):
        raise ValueError(f"region shape {r.shape} does not match image {(h, w)}")
    return r


def bounding_box(region) -> tuple[slice, slice]:
    rows = np.flatnonzero(region.any(axis=1))
    cols = np.flatnonzero(region.any(axis=0))
    if rows.size == 0:
        raise ValueError("region is empty")
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


def _crop(img: np.ndarray, region) -> np.ndarray:
    r = region_array(region, img.shape)
    if r is None:
        return img
    ys, xs = bounding_box(r)
    return img[..., ys, xs]


def _channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[None] if img.ndim == 2 else img


def _check_pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only fully supported window centres."""
    h = len(k) // 2
    y = ndimage.correlate1d(ndimage.correlate1d(x, k, axis=-1), k, axis=-2)
    return y[..., h:-h, h:-h]


def ssim(a, b, region=None) -> float:
    """Mean single-scale SSIM over window centres inside the region's bounding box."""
    a, b = _check_pair(a, b)
    a, b = _channels(_crop(a, region)), _channels(_crop(b, region))
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"region {a.shape[-2:]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    k = gaussian_kernel()
    mu_a, mu_b = _filter_valid(a, k), _filter_valid(b, k)
    var_a = _filter_valid(a * a, k) - mu_a * mu_a
    var_b = _filter_valid(b * b, k) - mu_b * mu_b
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def psnr(a, b, region=None) -> float:
    """PSNR in dB over the exact region for unit dynamic range, capped at 100."""
    a, b = _check_pair(a, b)
    diff = _channels(a) - _channels(b)
    r = region_array(region, a.shape)
    sq = diff**2 if r is None else diff[:, r] ** 2
    if sq.size == 0:
        raise ValueError("region is empty")
    mse = float(sq.mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * np.log10(1.0 / mse))


def grayscale(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[0] != 3:
        raise ValueError("expected [3, H, W] or [H, W]")
    return np.tensordot(LUMA, img, axes=1)


def _edge_widths(gray: np.ndarray, edges: np.ndarray, gx: np.ndarray) -> np.ndarray:
    """Width of each vertical edge: distance between the intensity extrema bracketing it along its row."""
    h, w = gray.shape
    widths = np.zeros(edges.shape)
    for r, c in zip(*np.nonzero(edges)):
        row = gray[r]
        sign = 1.0 if gx[r, c] > 0 else -1.0
        right = c
        while right + 1 < w and sign * (row[right + 1] - row[right]) > 0:
            right += 1
        left = c
        while left - 1 >= 0 and sign * (row[left] - row[left - 1]) > 0:
            left -= 1
        widths[r, c] = right - left
    return widths


def sobel_edges(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vertical Sobel edges thinned to row-wise maxima above a fraction of the peak response."""
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    mag = np.abs(gx)
    peak = mag.max()
    if peak <= EDGE_FLOOR:
        return np.zeros(gray.shape, dtype=bool), gx
    left = np.pad(mag, ((0, 0), (1, 0)), mode="edge")[:, :-1]
    right = np.pad(mag, ((0, 0), (0, 1)), mode="edge")[:, 1:]
    edges = (mag >= EDGE_THRESHOLD * peak) & (mag >= left) & (mag > right)
    return edges, gx


def cpbd(img, region=None, return_flag: bool = False):
    """Cumulative probability of blur detection (higher is sharper).

    Returns 0.0 when the region has no edges; with ``return_flag`` the result
    is ``(value, no_edges)``.
    """
    gray = grayscale(_crop(np.asarray(img), region))
    edges, gx = sobel_edges(gray)
    widths = _edge_widths(gray, edges, gx)
    probs = []
    h, w = gray.shape
    for y in range(0, h, CPBD_BLOCK):
        for x in range(0, w, CPBD_BLOCK):
            blk = (slice(y, y + CPBD_BLOCK), slice(x, x + CPBD_BLOCK))
            e = edges[blk]
            if e.sum() <= CPBD_EDGE_FRACTION * e.size:
                continue
            contrast = 255 * (gray[blk].max() - gray[blk].min())
            w_jnb = 5.0 if contrast <= 50 else 3.0
            probs.append(1 - np.exp(-np.abs(widths[blk][e] / w_jnb) ** CPBD_BETA))
    if not probs:
        log.warning("cpbd: no edges detected in region")
        return (0.0, True) if return_flag else 0.0
    p = np.concatenate(probs)
    value = float(np.mean(p <= CPBD_P_JNB))
    return (value, False) if return_flag else value


def _check_cov(c: np.ndarray, name: str, tol: float = 1e-6):
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"{name} covariance must be square")
    if not np.allclose(c, c.T, atol=tol):
        raise ValueError(f"{name} covariance is not symmetric")
    lo = np.linalg.eigvalsh((c + c.T) / 2).min()
    if lo < -tol * max(1.0, np.abs(c).max()):
        raise ValueError(f"{name} covariance is not positive semidefinite (min eigenvalue {lo:.3g})")


def frechet_distance(stats_a, stats_b, eps: float = 1e-6) -> float:
    """Fréchet distance between Gaussians given as (mean, covariance) pairs."""
    mu_a, cov_a = (np.atleast_1d(np.asarray(s, dtype=np.float64)) for s in stats_a)
    mu_b, cov_b = (np.atleast_1d(np.asarray(s, dtype=np.float64)) for s in stats_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape or cov_a.shape[0] != mu_a.size:
        raise ValueError("statistics dimensions do not match")
    _check_cov(cov_a, "first")
    _check_cov(cov_b, "second")
    if np.array_equal(mu_a, mu_b) and np.array_equal(cov_a, cov_b):
        return 0.0
    covmean = linalg.sqrtm(cov_a @ cov_b)
    if not np.all(np.isfinite(covmean)):
        offset = eps * np.eye(len(mu_a))
        covmean = linalg.sqrtm((cov_a + offset) @ (cov_b + offset))
    covmean = np.real(covmean)
    d = mu_a - mu_b
    return max(0.0, float(d @ d + np.trace(cov_a) + np.trace(cov_b) - 2 * np.trace(covmean)))


def image_features(frames, region=None) -> np.ndarray:
    """Per-frame 64-bin channel histograms plus 8x8 pooled pixels ([N, 384]); frames in [0, 1]."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        frames = frames[None]
    frames = np.stack([_crop(f, region) for f in frames]) if region is not None else frames
    hists = [
        np.histogram(np.clip(f[c], 0, 1), bins=HIST_BINS, range=(0, 1))[0] / f[c].size
        for f in frames
        for c in range(f.shape[0])
    ]
    hists = np.asarray(hists).reshape(len(frames), -1)
    pooled = F.adaptive_avg_pool2d(torch.from_numpy(frames), POOL_SIZE).reshape(len(frames), -1).numpy()
    return np.concatenate([hists, pooled], axis=1)


def feature_stats(features) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(features, dtype=np.float64)
    if len(f) < 2:
        return f.mean(axis=0), np.zeros((f.shape[1], f.shape[1]))
    return f.mean(axis=0), np.cov(f, rowvar=False)


def pearson(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two 1-D series of equal length")
    xc, yc = x - x.mean(), y - y.mean()
    nx, ny = np.sqrt(xc @ xc), np.sqrt(yc @ yc)
    if nx == 0 or ny == 0:
        raise UndefinedCorrelationError("constant series: correlation undefined")
    return float(np.clip(xc @ yc / (nx * ny), -1.0, 1.0))


def sync_proxy(frames, audio: Waveform, aperture_extractor=measure_apertures) -> float:
    """Pearson r between per-frame mouth aperture and audio RMS envelope; frames in [-1, 1]."""
    apertures = np.asarray(aperture_extractor(frames), dtype=np.float64)
    return pearson(apertures, audio_envelope(audio, len(apertures)))


def evaluate_clip(generated, reference, masks=None, audio: Waveform | None = None, name: str = "",
                  aperture_extractor=measure_apertures) -> dict:
    """One report row. Frames are [N, 3, S, S] in [-1, 1]; ``masks`` [N, S, S] restricts the region.

    Frame 0 is the unedited identity frame, so per-frame metrics average over
    frames 1.. when the clip has more than one frame.
    """
    gen, ref = to_unit(generated), to_unit(reference)
    if gen.shape != ref.shape:
        raise ValueError(f"{name}: generated {gen.shape} vs reference {ref.shape}")
    idx = range(1, len(gen)) if len(gen) > 1 else range(len(gen))
    region = (lambda i: None) if masks is None else (lambda i: masks[i])
    row = {
        "clip": name,
        "n_frames": len(gen),
        "ssim": float(np.mean([ssim(gen[i], ref[i], region(i)) for i in idx])),
        "psnr_db": float(np.mean([psnr(gen[i], ref[i], region(i)) for i in idx])),
        "cpbd": float(np.mean([cpbd(gen[i], region(i)) for i in idx])),
    }
    union = None if masks is None else np.asarray(masks).any(axis=0)
    fa = feature_stats(image_features(gen[list(idx)], union))
    fb = feature_stats(image_features(ref[list(idx)], union))
    row["frechet"] = frechet_distance(fa, fb)
    row["sync_proxy_r"] = None
    if audio is not None:
        try:
            row["sync_proxy_r"] = sync_proxy(generated, audio, aperture_extractor)
        except UndefinedCorrelationError as exc:
            log.warning("%s: %s", name, exc)
    return row


METRIC_KEYS = ("ssim", "psnr_db", "cpbd", "frechet", "sync_proxy_r")


@dataclass
class MetricReport:
    region_mode: str
    rows: list = field(default_factory=list)
    frechet_all: float | None = None
    fingerprint: str = ""
    seed: int | None = None

    def __post_init__(self):
        if self.region_mode not in ("masked_region", "full_frame"):
            raise ValueError(f"unknown region_mode {self.region_mode!r}")

    def aggregates(self) -> dict:
        out = {}
        for k in METRIC_KEYS:
            vals = [r[k] for r in self.rows if r.get(k) is not None]
            out[k] = float(np.mean(vals)) if vals else None
        out["frechet_all"] = self.frechet_all
        return out

    def to_dict(self) -> dict:
        return {
            "region_mode": self.region_mode,
            "fingerprint": self.fingerprint,
            "seed": self.seed,
            "rows": self.rows,
            "aggregate": self.aggregates(),
        }

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / "report.json", self.to_dict())
        cols = ["clip", "n_frames", *METRIC_KEYS]
        with open(out_dir / "report.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            for r in self.rows:
                writer.writerow(["" if r.get(c) is None else r[c] for c in cols])
        return out_dir / "report.json", out_dir / "report.csv"
