"""Command-line entry point: synth-data, preprocess, train, dub, evaluate.

Exit status: 0 success, 2 bad arguments, 3 data error, 4 runtime failure.
Each command prints a one-line JSON summary on stdout.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .checkpoint import load_checkpoint
from .config import RunConfig
from .dataset import TrainingPairs, load_split, masks_from_landmarks, preprocess_dataset
from .dubber import DubRequest, dub_video, write_dub_output
from .io import DataError, fingerprint, load_frames, read_json, read_wav, write_json
from .metrics import METRIC_KEYS, MetricReport, evaluate_clip, feature_stats, frechet_distance, image_features, to_unit
from .synthgen import audio_envelope, make_dataset, measure_apertures
from .trainer import LOSS_LOG, read_loss_log, train_loop
from .videoprep import crop_clip

log = logging.getLogger("lipdiff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
STEP_CHOICES = ("100", "500", "1000", "full")
OUTPUT_ROOT_ENV = "LIPDIFF_OUTPUT_ROOT"


class UsageError(Exception):
    pass


def _out_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


def _require_dir(p, what: str) -> Path:
    p = Path(p)
    if not p.is_dir():
        raise UsageError(f"{what} {p} is not a directory")
    return p


def _emit(summary: dict):
    print(json.dumps(summary, sort_keys=True))


def cmd_synth_data(args) -> dict:
    if args.identities < 1 or args.clips < 1 or args.duration <= 0:
        raise UsageError("--identities, --clips and --duration must be positive")
    if args.image_size not in (16, 32, 64, 128):
        raise UsageError("--image-size must be one of 16, 32, 64, 128")
    out = _out_path(args.out)
    manifest = make_dataset(args.identities, args.clips, args.duration, args.image_size, out, args.seed, args.holdout)
    return {"command": "synth-data", "out": str(out), "clips": len(manifest["clips"]),
            "fingerprint": manifest["fingerprint"], "seed": args.seed}


def cmd_preprocess(args) -> dict:
    src = _require_dir(args.src, "--src")
    out = _out_path(args.out)
    manifest = preprocess_dataset(src, out, args.image_size)
    fp = fingerprint({"source": manifest.get("fingerprint"), "image_size": args.image_size,
                      "feature_stats": manifest["feature_stats"]})
    manifest["preprocess_fingerprint"] = fp
    write_json(out / "manifest.json", manifest)
    return {"command": "preprocess", "out": str(out), "clips": len(manifest["clips"]), "fingerprint": fp}


def _train_overrides(args) -> dict:
    ov: dict = {"data": {}, "train": {}}
    if args.data is not None:
        ov["data"]["root"] = str(args.data)
    if args.image_size is not None:
        ov["data"]["image_size"] = args.image_size
    if args.seed is not None:
        ov["seed"] = args.seed
    if args.epochs is not None:
        ov["train"]["epochs"] = args.epochs
        ov["train"]["max_steps"] = None
    if args.max_steps is not None:
        ov["train"]["max_steps"] = args.max_steps
    if args.batch_size is not None:
        ov["train"]["batch_size"] = args.batch_size
    return ov


def cmd_train(args) -> dict:
    try:
        cfg = RunConfig.load(args.config, _train_overrides(args))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    if cfg.values["train"]["epochs"] < 0:
        raise UsageError("--epochs must be >= 0")
    root = cfg.values["data"]["root"]
    if root is None:
        raise UsageError("no dataset: pass --data or set data.root in the config")
    _require_dir(root, "dataset")
    if args.resume is not None:
        _require_dir(args.resume, "--resume")
    out = _out_path(args.out)
    clips, stats = load_split(root, "train")
    size = clips[0].frames.shape[-1]
    if size != cfg.unet().image_size:
        raise DataError(f"dataset frames are {size}px but the model expects {cfg.unet().image_size}px")
    paths = train_loop(TrainingPairs(clips), cfg.train(), cfg.unet(), cfg.schedule(), out, stats,
                       resume=args.resume, run_config=cfg.to_dict())
    rows = read_loss_log(out / LOSS_LOG) if (out / LOSS_LOG).exists() else []
    figures = []
    if rows:
        figures.append(str(plotting.loss_curve(rows, out / "figures" / "loss.png")))
    return {"command": "train", "out": str(out), "checkpoints": [str(p) for p in paths],
            "steps": rows[-1]["step"] if rows else 0, "fingerprint": cfg.fingerprint, "seed": cfg.seed,
            "figures": figures}


def _load_video(video: Path, size: int):
    frames = load_frames(video / "frames")
    landmarks = read_json(video / "landmarks.json")
    if len(landmarks) != len(frames):
        raise DataError(f"{video}: {len(landmarks)} landmark sets for {len(frames)} frames")
    if frames.shape[-1] != size or frames.shape[-2] != size:
        frames, landmarks, _ = crop_clip(frames, landmarks, size)
    return frames, landmarks


def _encode(out: Path, audio_path: Path) -> Path:
    exe = shutil.which("ffmpeg")
    if exe is None:
        raise RuntimeError("--encode needs an ffmpeg binary on PATH")
    target = out / "video.mp4"
    subprocess.run([exe, "-y", "-loglevel", "error", "-framerate", "25", "-i", str(out / "frames" / "%06d.png"),
                    "-i", str(audio_path), "-shortest", "-pix_fmt", "yuv420p", str(target)], check=True)
    return target


def cmd_dub(args) -> dict:
    ckpt = _require_dir(args.checkpoint, "--checkpoint")
    video = _require_dir(args.video, "--video")
    audio_path = Path(args.audio) if args.audio else video / "audio.wav"
    if not audio_path.is_file():
        raise UsageError(f"audio file {audio_path} not found")
    ck = load_checkpoint(ckpt, use_ema=args.use_ema)
    steps = "full" if args.steps == "full" else int(args.steps)
    if steps != "full" and steps > ck.schedule.num_steps:
        raise UsageError(f"--steps {steps} exceeds the checkpoint's {ck.schedule.num_steps} diffusion steps")
    frames, landmarks = _load_video(video, ck.model.config.image_size)
    masks = masks_from_landmarks(landmarks, frames.shape[-1])
    audio = read_wav(audio_path)
    req = DubRequest(frames, masks, audio, steps, args.seed)
    result = dub_video(req, ck.model, ck.schedule, ck.stats)
    out = _out_path(args.out)
    fp = fingerprint({"checkpoint": ck.meta.get("fingerprint"), "step": ck.step, "video": str(video),
                      "audio": str(audio_path), "steps": steps, "seed": args.seed, "use_ema": args.use_ema})
    write_dub_output(out, result, {"fingerprint": fp, "checkpoint": str(ckpt), "checkpoint_step": ck.step,
                                   "video": str(video), "audio": str(audio_path), "requested_steps": args.steps})
    write_json(out / "landmarks.json", landmarks)
    summary = {"command": "dub", "out": str(out), "frames": len(result.frames), "steps": result.steps,
               "seed": args.seed, "fingerprint": fp,
               "mean_frame_seconds": float(np.mean(result.frame_seconds[1:])) if len(result.frames) > 1 else 0.0}
    if args.encode:
        summary["video_file"] = str(_encode(out, audio_path))
    return summary


def _pairs(generated: Path, reference: Path) -> list[tuple[str, Path, Path]]:
    if (generated / "frames").is_dir():
        ref = reference if (reference / "frames").is_dir() else reference / generated.name
        return [(generated.name, generated, ref)]
    out = []
    for g in sorted(p for p in generated.iterdir() if (p / "frames").is_dir()):
        ref = reference / g.name
        if not (ref / "frames").is_dir():
            ref = reference / "clips" / g.name
        out.append((g.name, g, ref))
    if not out:
        raise DataError(f"no generated clips under {generated}")
    return out


def _sync_audio(gen: Path, ref: Path, override):
    if override:
        return read_wav(override)
    if (gen / "result.json").exists():
        recorded = read_json(gen / "result.json").get("audio")
        if recorded and Path(recorded).is_file():
            return read_wav(recorded)
    if (ref / "audio.wav").is_file():
        return read_wav(ref / "audio.wav")
    return None


def cmd_evaluate(args) -> dict:
    generated = _require_dir(args.generated, "--generated")
    reference = _require_dir(args.reference, "--reference")
    if args.audio and not Path(args.audio).is_file():
        raise UsageError(f"audio file {args.audio} not found")
    masked = args.region == "masked"
    report = MetricReport("masked_region" if masked else "full_frame", seed=args.seed)
    out = _out_path(args.out)
    all_gen, all_ref, sources = [], [], []
    for name, gen_dir, ref_dir in _pairs(generated, reference):
        gen = load_frames(gen_dir / "frames")
        ref = load_frames(ref_dir / "frames")
        if gen.shape != ref.shape:
            raise DataError(f"{name}: generated {gen.shape} vs reference {ref.shape}")
        masks = None
        if masked:
            lm_file = ref_dir / "landmarks.json" if (ref_dir / "landmarks.json").exists() else gen_dir / "landmarks.json"
            masks = masks_from_landmarks(read_json(lm_file), gen.shape[-1])
        audio = _sync_audio(gen_dir, ref_dir, args.audio)
        row = evaluate_clip(gen, ref, masks, audio, name, measure_apertures)
        report.rows.append(row)
        all_gen.append(gen[1:] if len(gen) > 1 else gen)
        all_ref.append(ref[1:] if len(ref) > 1 else ref)
        sources.append({"clip": name, "generated": str(gen_dir), "reference": str(ref_dir)})
        if audio is not None and row["sync_proxy_r"] is not None:
            plotting.sync_series(measure_apertures(gen), audio_envelope(audio, len(gen)),
                                 out / "figures" / f"sync_{name}.png", f"{name}  r={row['sync_proxy_r']:.3f}")
        plotting.frame_strip(gen, ref, out / "figures" / f"frames_{name}.png")
    # pooled Fréchet distance is always on full frames
    report.frechet_all = frechet_distance(feature_stats(image_features(to_unit(np.concatenate(all_gen)))),
                                          feature_stats(image_features(to_unit(np.concatenate(all_ref)))))
    report.fingerprint = fingerprint({"sources": sources, "region": report.region_mode, "seed": args.seed})
    report.write(out)
    plotting.metric_bars(report.rows, METRIC_KEYS, out / "figures" / "metrics.png")
    return {"command": "evaluate", "out": str(out), "fingerprint": report.fingerprint, "seed": args.seed,
            "aggregate": report.aggregates()}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lipdiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a synthetic sprite dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--identities", type=int, default=5)
    s.add_argument("--clips", type=int, default=10)
    s.add_argument("--duration", type=float, default=3.0)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--holdout", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("preprocess", help="crop, resample and cache features for a dataset")
    s.add_argument("--src", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--image-size", type=int, default=128)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train the conditioned U-Net")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--resume")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--image-size", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("dub", help="re-synthesize the lower face of a clip for new audio")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--video", required=True, help="clip directory with frames/ and landmarks.json")
    s.add_argument("--audio", help="WAV file (defaults to the clip's own audio.wav)")
    s.add_argument("--steps", choices=STEP_CHOICES, default="full")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--use-ema", action="store_true")
    s.add_argument("--encode", action="store_true", help="also mux frames and audio with ffmpeg")
    s.set_defaults(func=cmd_dub)

    s = sub.add_parser("evaluate", help="score generated clips against references")
    s.add_argument("--generated", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--audio", help="audio for the sync proxy (default: the audio used for dubbing)")
    s.add_argument("--region", choices=("masked", "full"), default="masked")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        _emit(args.func(args))
        return EXIT_OK
    except UsageError as exc:
        print(f"lipdiff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"lipdiff: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"lipdiff: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
