"""Report figures rendered to PNG files with the non-interactive backend."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def loss_curve(rows: list[dict], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        steps = [r["step"] for r in rows]
        ax.plot(steps, [r["loss"] for r in rows], lw=0.8, label="batch loss")
        if len(rows) >= 20:
            k = max(1, len(rows) // 20)
            smooth = np.convolve([r["loss"] for r in rows], np.ones(k) / k, mode="valid")
            ax.plot(steps[k - 1 :], smooth, lw=1.5, label=f"mean of {k}")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("masked MSE")
        ax.legend(frameon=False)
        return _save(fig, path)


def sync_series(apertures, envelope, path, title: str = "") -> Path:
    """Measured mouth aperture against the audio RMS envelope, frame by frame."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 2.5))
        ax.plot(apertures, label="aperture (frames)")
        ax.plot(envelope, ls="--", label="RMS envelope (audio)")
        ax.set_xlabel("frame")
        ax.set_title(title)
        ax.legend(frameon=False, fontsize=8)
        return _save(fig, path)


def metric_bars(rows: list[dict], keys, path) -> Path:
    keys = [k for k in keys if any(r.get(k) is not None for r in rows)]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(keys), figsize=(2.2 * len(keys), 2.6), squeeze=False)
        names = [r["clip"] for r in rows]
        for ax, k in zip(axes[0], keys):
            vals = [np.nan if r.get(k) is None else r[k] for r in rows]
            ax.bar(range(len(vals)), vals)
            ax.set_title(k)
            ax.set_xticks(range(len(vals)))
            ax.set_xticklabels(names, rotation=90, fontsize=6)
        return _save(fig, path)


def frame_strip(generated, reference, path, n: int = 6) -> Path:
    """Evenly spaced frames, generated on top and reference below; inputs [N, 3, H, W] in [-1, 1]."""
    idx = np.linspace(0, len(generated) - 1, min(n, len(generated))).round().astype(int)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, len(idx), figsize=(1.3 * len(idx), 2.8), squeeze=False)
        for j, i in enumerate(idx):
            for r, src in enumerate((generated, reference)):
                ax = axes[r, j]
                ax.imshow(np.clip((np.transpose(src[i], (1, 2, 0)) + 1) / 2, 0, 1))
                ax.set_xticks([])
                ax.set_yticks([])
                ax.grid(False)
            axes[0, j].set_title(f"frame {i}", fontsize=7)
        axes[0, 0].set_ylabel("generated", fontsize=7)
        axes[1, 0].set_ylabel("reference", fontsize=7)
        return _save(fig, path)


def step_timing(timings: dict, path) -> Path:
    """Mean per-frame seconds against the number of reverse steps."""
    steps = sorted(timings)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(steps, [np.mean(timings[s]) for s in steps], marker="o")
        ax.set_xlabel("reverse steps")
        ax.set_ylabel("seconds per frame")
        return _save(fig, path)
