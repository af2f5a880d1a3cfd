import filecmp
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipdiff.audiofeat import Waveform, compute_mel
from lipdiff.io import from_uint8, read_json, read_wav, to_uint8
from lipdiff.synthgen import (
    MOUTH_CENTER,
    MOUTH_HALF_WIDTH,
    MOUTH_MAX_HALF_HEIGHT,
    SpriteIdentity,
    aperture_from_audio,
    make_clip,
    make_dataset,
    measure_aperture,
    render_frame,
    rms,
    synth_audio,
)
from lipdiff.videoprep import compute_mask


def test_audio_deterministic_and_bounded():
    a, b = synth_audio(7, 2.0), synth_audio(7, 2.0)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert np.max(np.abs(a.samples)) <= 0.9 + 1e-12
    assert len(a) == 32000
    assert not np.array_equal(a.samples, synth_audio(8, 2.0).samples)


def test_audio_has_exact_silences():
    w = synth_audio(3, 3.0)
    assert np.sum(w.samples == 0.0) > 0.1 * 16000
    assert np.max(np.abs(w.samples)) > 0.1


def test_sine_rms():
    t = np.arange(16000) / 16000
    assert rms(np.sin(2 * math.pi * 200 * t)) == pytest.approx(1 / math.sqrt(2), abs=1e-3)


def test_aperture_silent_and_full_scale():
    assert aperture_from_audio(Waveform(np.zeros(16000), 16000), 10) == 0.0
    t = np.arange(16000) / 16000
    w = Waveform(0.9 * np.sin(2 * math.pi * 250 * t), 16000)
    assert aperture_from_audio(w, 12) == pytest.approx(0.9 / math.sqrt(2) / 0.7, abs=2e-3)


def test_aperture_is_local():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(16000) * 0.3
    y = x.copy()
    i = 12  # window covers samples 7360 .. 8000
    y[:7360] = rng.standard_normal(7360)
    y[8000:] = 0
    assert aperture_from_audio(Waveform(x, 16000), i) == aperture_from_audio(Waveform(y, 16000), i)


def test_render_deterministic_and_closed_mouth():
    ident = SpriteIdentity(4)
    a, lm = render_frame(ident, 0.0, 64)
    b, _ = render_frame(ident, 0.0, 64)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (3, 64, 64) and a.dtype == np.float32
    assert a.min() >= -1 and a.max() <= 1
    assert set(lm) == {"nose_tip", "jaw_left", "jaw_right", "chin", "mouth_left", "mouth_right"}


def mouth_pixels(img, ident):
    unit = (img + 1) / 2
    from lipdiff.synthgen import INTERIOR_COLOR

    return int(np.sum(np.linalg.norm(unit - INTERIOR_COLOR[:, None, None], axis=0) < 0.1))


def test_full_aperture_maximises_mouth_area():
    ident = SpriteIdentity(2)
    counts = [mouth_pixels(render_frame(ident, a, 64)[0], ident) for a in (0.0, 0.3, 0.7, 1.0)]
    assert counts[0] == 0
    assert counts == sorted(counts)
    assert counts[-1] > counts[-2]


def count_mouth_rows(img):
    """Oracle: number of interior-coloured rows in the centre column."""
    from lipdiff.synthgen import INTERIOR_COLOR

    S = img.shape[-1]
    unit = (img + 1) / 2
    col = unit[:, :, S // 2]
    dist = np.linalg.norm(col - INTERIOR_COLOR[:, None], axis=0)
    return int(np.sum(dist < 0.05))


@pytest.mark.parametrize("size", [32, 64, 128])
def test_aperture_recovery(size):
    ident = SpriteIdentity(11)
    for a in np.linspace(0, 1, 21):
        img, _ = render_frame(ident, float(a), size)
        assert measure_aperture(img) == pytest.approx(a, abs=1 / size)
        # row-count oracle: full rows span at most the ellipse height
        rows = count_mouth_rows(img)
        assert rows <= 2 * a * MOUTH_MAX_HALF_HEIGHT * size + 1e-9


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(0, 1), size=st.sampled_from([32, 64, 128]))
def test_aperture_recovery_after_png_quantization(seed, a, size):
    img, _ = render_frame(SpriteIdentity(seed), a, size)
    stored = from_uint8(to_uint8(img))
    assert measure_aperture(stored) == pytest.approx(a, abs=1 / size)


def test_identity_colours_separated():
    colors = [SpriteIdentity(s).face_color for s in range(343)]
    for i in range(len(colors)):
        for j in range(i + 1, len(colors)):
            assert np.max(np.abs(colors[i] - colors[j])) >= 16 / 255 - 1e-12


def test_mask_covers_open_mouth():
    for size in (32, 64, 128):
        img, lm = render_frame(SpriteIdentity(0), 1.0, size)
        m = compute_mask(lm, size)
        assert m.x0 <= MOUTH_CENTER[0] - MOUTH_HALF_WIDTH
        assert m.x1 >= MOUTH_CENTER[0] + MOUTH_HALF_WIDTH
        assert m.y0 <= MOUTH_CENTER[1] - MOUTH_MAX_HALF_HEIGHT
        assert m.y1 >= MOUTH_CENTER[1] + MOUTH_MAX_HALF_HEIGHT
        mask = m.to_array(size, size)
        base, _ = render_frame(SpriteIdentity(0), 0.0, size)
        changed = np.any(img != base, axis=0)
        assert not np.any(changed & ~mask)


def test_clip_oracle_chain():
    clip = make_clip(SpriteIdentity(5), audio_seed=9, duration_s=2.0, size=64)
    assert clip.n_frames == 50 == len(clip.apertures)
    for i in range(clip.n_frames):
        assert clip.apertures[i] == aperture_from_audio(clip.audio, i)
        assert measure_aperture(clip.frames[i]) == pytest.approx(clip.apertures[i], abs=1 / 64)
    assert np.ptp(clip.apertures) > 0.2


def test_dataset_layout_and_reproducibility(tmp_path):
    m = make_dataset(3, 2, 1.0, 32, tmp_path / "a", seed=4)
    make_dataset(3, 2, 1.0, 32, tmp_path / "b", seed=4)
    assert len(m["clips"]) == 6
    assert [c["split"] for c in m["clips"]] == ["train"] * 4 + ["test"] * 2
    clip = tmp_path / "a" / "clips" / "id00_c000"
    assert len(list((clip / "frames").glob("*.png"))) == 25
    meta = read_json(clip / "meta.json")
    assert meta["fps"] == 25 and meta["split"] == "train"
    assert len(compute_mel(read_wav(clip / "audio.wav"))) in (49, 50, 51)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files
    for name in ("id00_c000", "id02_c001"):
        for f in ("audio.wav", "meta.json", "landmarks.json", "frames/000010.png"):
            assert filecmp.cmp(tmp_path / "a/clips" / name / f, tmp_path / "b/clips" / name / f, shallow=False)


def test_dataset_arithmetic(tmp_path):
    m = make_dataset(5, 2, 3.0, 16, tmp_path, seed=0)
    assert len(m["clips"]) == 10
    n = len(list((tmp_path / "clips" / "id04_c001" / "frames").glob("*.png")))
    assert n == 75
    spec = compute_mel(read_wav(tmp_path / "clips" / "id04_c001" / "audio.wav"))
    assert abs(len(spec) - 150) <= 1


def test_dataset_rejects_bad_holdout(tmp_path):
    with pytest.raises(ValueError):
        make_dataset(2, 1, 1.0, 16, tmp_path, n_holdout=2)
