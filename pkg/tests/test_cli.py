import json

import numpy as np
import pytest

from lipdiff.cli import main
from lipdiff.config import RunConfig
from lipdiff.io import DataError, load_frames, read_json

TINY = {
    "data": {"image_size": 32},
    "schedule": {"kind": "linear", "num_steps": 100, "beta_start": 1e-4, "beta_end": 0.05},
    "unet": {"inner_channels": 16, "channel_multiples": [1, 2], "res_blocks_per_stage": 1,
             "attention_resolutions": [], "dropout": 0.0},
    "train": {"batch_size": 2, "learning_rate": 1e-3},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip()
    return code, (json.loads(out.splitlines()[-1]) if code == 0 else None)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-data", "--out", str(root / "data"), "--identities", "1", "--clips", "2",
                 "--duration", "0.4", "--image-size", "32", "--holdout", "1", "--seed", "2"]) == 0
    (root / "cfg.json").write_text(json.dumps(TINY))
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--config",
                 str(root / "cfg.json"), "--max-steps", "2"]) == 0
    return root


def test_synth_data_summary(tmp_path, capsys):
    code, summary = run(capsys, "synth-data", "--out", tmp_path / "d", "--identities", "1", "--clips", "1",
                        "--duration", "0.2", "--image-size", "16", "--holdout", "0")
    assert code == 0 and summary["command"] == "synth-data"
    assert (tmp_path / "d" / "manifest.json").exists()


def test_train_zero_epochs(workspace, tmp_path, capsys):
    code, summary = run(capsys, "train", "--data", workspace / "data", "--out", tmp_path / "r", "--config",
                        workspace / "cfg.json", "--epochs", "0")
    assert code == 0
    assert [p.split("/")[-1] for p in summary["checkpoints"]] == ["ckpt_00000000"]
    assert summary["steps"] == 0


def test_train_outputs(workspace):
    run_dir = workspace / "run"
    assert (run_dir / "ckpt_00000002").is_dir()
    assert (run_dir / "figures" / "loss.png").stat().st_size > 0
    assert len((run_dir / "loss_log.csv").read_text().splitlines()) == 3


def test_dub_step_counts(workspace, tmp_path, capsys):
    ckpt = workspace / "run" / "ckpt_00000002"
    clip = workspace / "data" / "clips" / sorted(p.name for p in (workspace / "data" / "clips").iterdir())[0]
    for steps in ("100", "full"):
        code, summary = run(capsys, "dub", "--checkpoint", ckpt, "--video", clip, "--steps", steps,
                            "--out", tmp_path / steps)
        assert code == 0 and summary["steps"] == 100
        assert read_json(tmp_path / steps / "result.json")["steps"] == 100
    assert run(capsys, "dub", "--checkpoint", ckpt, "--video", clip, "--steps", "500",
               "--out", tmp_path / "x")[0] == 2
    ref = load_frames(clip / "frames")
    out = load_frames(tmp_path / "full" / "frames")
    np.testing.assert_array_equal(out[0], ref[0])


def test_evaluate_identical_and_reproducible(workspace, tmp_path, capsys):
    clips = workspace / "data" / "clips"
    code, summary = run(capsys, "evaluate", "--generated", clips, "--reference", clips, "--out", tmp_path / "a")
    assert code == 0
    rows = read_json(tmp_path / "a" / "report.json")["rows"]
    assert len(rows) == 2
    assert all(r["ssim"] == 1.0 and r["psnr_db"] == 100.0 for r in rows)
    run(capsys, "evaluate", "--generated", clips, "--reference", clips, "--out", tmp_path / "b")
    for name in ("report.json", "report.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    figs = sorted(p.name for p in (tmp_path / "a" / "figures").iterdir())
    assert "metrics.png" in figs and any(f.startswith("sync_") for f in figs)


def test_evaluate_full_region(workspace, tmp_path, capsys):
    clips = workspace / "data" / "clips"
    code, _ = run(capsys, "evaluate", "--generated", clips, "--reference", clips, "--region", "full",
                  "--out", tmp_path)
    assert code == 0
    assert read_json(tmp_path / "report.json")["region_mode"] == "full_frame"


def test_output_root_env(workspace, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("LIPDIFF_OUTPUT_ROOT", str(tmp_path))
    clips = workspace / "data" / "clips"
    assert run(capsys, "evaluate", "--generated", clips, "--reference", clips, "--out", "rel")[0] == 0
    assert (tmp_path / "rel" / "report.json").exists()


def test_exit_codes(workspace, tmp_path, capsys):
    assert main([]) == 2
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert main(["dub", "--checkpoint", str(tmp_path / "none"), "--video", ".", "--out", str(tmp_path)]) == 2
    assert main(["evaluate", "--generated", str(tmp_path), "--reference", str(tmp_path), "--region", "bbox",
                 "--out", str(tmp_path)]) == 2
    (tmp_path / "empty").mkdir()
    assert main(["train", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 3
    assert main(["evaluate", "--generated", str(tmp_path / "empty"), "--reference", str(tmp_path / "empty"),
                 "--out", str(tmp_path / "o")]) == 3
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "o"),
                 "--config", str(tmp_path / "bad.json")]) == 3
    capsys.readouterr()


def test_run_config_validation(tmp_path):
    cfg = RunConfig(TINY)
    assert cfg.unet().image_size == 32 and cfg.schedule().num_steps == 100
    assert RunConfig(TINY).fingerprint == cfg.fingerprint
    assert RunConfig({**TINY, "seed": 1}).fingerprint != cfg.fingerprint
    with pytest.raises(ValueError):
        RunConfig({"optimizer": {}})
    with pytest.raises((TypeError, ValueError)):
        RunConfig({"train": {"learning_rate": -1.0}})
    (tmp_path / "c.json").write_text(json.dumps(TINY))
    loaded = RunConfig.load(tmp_path / "c.json", {"seed": 4})
    assert loaded.seed == 4 and loaded.train().seed == 4
    with pytest.raises(DataError):
        RunConfig.load(tmp_path / "missing.json")
