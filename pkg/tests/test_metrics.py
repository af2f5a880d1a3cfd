import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from lipdiff.audiofeat import Waveform
from lipdiff.metrics import (
    MetricReport,
    UndefinedCorrelationError,
    cpbd,
    evaluate_clip,
    feature_stats,
    frechet_distance,
    image_features,
    pearson,
    psnr,
    ssim,
    sync_proxy,
)
from lipdiff.synthgen import SpriteIdentity, make_clip, render_frame
from lipdiff.videoprep import MaskSpec

REGION = MaskSpec(0.2, 0.5, 0.8, 0.95)


def checkerboard(size=64, cell=8):
    return (np.kron(np.indices((size // cell, size // cell)).sum(0) % 2, np.ones((cell, cell)))).astype(float)


def outside_changed(img, seed=0):
    rng = np.random.default_rng(seed)
    m = REGION.to_array(*img.shape[-2:])
    out = img.copy()
    noise = rng.uniform(0, 1, img.shape)
    out[..., ~m] = noise[..., ~m]
    return out


def bbox_outside_changed(img, seed=0):
    """Modify every pixel outside the region's bounding box."""
    r0, r1, c0, c1 = REGION.pixel_box(*img.shape[-2:])
    keep = np.zeros(img.shape[-2:], bool)
    keep[r0:r1, c0:c1] = True
    out = img.copy()
    out[..., ~keep] = np.random.default_rng(seed).uniform(0, 1, img.shape)[..., ~keep]
    return out


def test_ssim_identity_and_constants():
    x = np.random.default_rng(0).random((3, 32, 32))
    assert ssim(x, x) == 1.0
    c = ssim(np.full((16, 16), 0.2), np.full((16, 16), 0.4))
    assert c == pytest.approx((2 * 0.08 + 1e-4) / (0.04 + 0.16 + 1e-4), abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), amp=st.floats(0.01, 0.5))
def test_ssim_symmetric_and_bounded(seed, amp):
    rng = np.random.default_rng(seed)
    a = rng.random((3, 24, 24))
    b = np.clip(a + amp * rng.standard_normal(a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert ssim(a, b) < 1.0


def test_ssim_region():
    img = np.random.default_rng(1).random((3, 64, 64))
    other = np.clip(img + 0.1, 0, 1)
    ref = ssim(img, other, REGION)
    assert ssim(bbox_outside_changed(img), bbox_outside_changed(other, 1), REGION) == ref
    with pytest.raises(ValueError):
        ssim(img, other, MaskSpec(0.1, 0.5, 0.2, 0.6))


def test_psnr_values():
    x = np.random.default_rng(2).random((3, 16, 16))
    assert psnr(x, x) == 100.0
    assert psnr(np.zeros((8, 8)), np.full((8, 8), 0.5)) == pytest.approx(10 * np.log10(1 / 0.25))
    assert psnr(np.zeros((8, 8)), np.full((8, 8), 0.5)) == pytest.approx(6.02, abs=0.01)


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(3)
    a = rng.random((3, 32, 32))
    n = rng.uniform(-1, 1, a.shape)
    vals = [psnr(a, a + amp * n) for amp in (0.01, 0.05, 0.2)]
    assert vals[0] > vals[1] > vals[2]


def test_psnr_region_exact_mask():
    a = np.random.default_rng(4).random((3, 64, 64))
    b = np.clip(a + 0.05, 0, 1)
    assert psnr(outside_changed(a), outside_changed(b, 1), REGION) == psnr(a, b, REGION)


def test_cpbd_blur_ordering():
    cb = checkerboard()
    blurred = ndimage.uniform_filter(cb, 5)
    assert cpbd(cb) > cpbd(blurred)
    img, _ = render_frame(SpriteIdentity(3), 0.6, 64)
    unit = (img + 1) / 2
    assert cpbd(unit) > cpbd(ndimage.uniform_filter(unit, (1, 5, 5)))


def test_cpbd_no_edges_and_determinism():
    val, flag = cpbd(np.full((32, 32), 0.3), return_flag=True)
    assert val == 0.0 and flag
    x = np.random.default_rng(5).random((3, 64, 64))
    assert cpbd(x) == cpbd(x)
    assert 0.0 <= cpbd(x) <= 1.0


def test_cpbd_region():
    x = np.random.default_rng(6).random((3, 64, 64))
    assert cpbd(bbox_outside_changed(x), REGION) == cpbd(x, REGION)


def test_frechet_fixtures():
    assert frechet_distance((0.0, 1.0), (1.0, 1.0)) == pytest.approx(1.0)
    rng = np.random.default_rng(7)
    f = rng.standard_normal((50, 6))
    s = feature_stats(f)
    assert frechet_distance(s, s) == 0.0
    g = feature_stats(rng.standard_normal((50, 6)) + 0.5)
    assert frechet_distance(s, g) == pytest.approx(frechet_distance(g, s), rel=1e-8)
    assert frechet_distance(s, g) > 0


@settings(max_examples=40, deadline=None)
@given(m1=st.floats(-5, 5), m2=st.floats(-5, 5), s1=st.floats(0.1, 3), s2=st.floats(0.1, 3))
def test_frechet_scalar_oracle(m1, m2, s1, s2):
    d = frechet_distance((m1, s1**2), (m2, s2**2))
    assert d == pytest.approx((m1 - m2) ** 2 + (s1 - s2) ** 2, rel=1e-7, abs=1e-9)


def test_frechet_rejects_bad_covariance():
    with pytest.raises(ValueError):
        frechet_distance((np.zeros(2), np.diag([1.0, -1.0])), (np.zeros(2), np.eye(2)))
    with pytest.raises(ValueError):
        frechet_distance((np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]])), (np.zeros(2), np.eye(2)))
    with pytest.raises(ValueError):
        frechet_distance((np.zeros(2), np.eye(2)), (np.zeros(3), np.eye(3)))


def test_feature_extractor_shape_and_region():
    frames = np.random.default_rng(8).random((4, 3, 32, 32))
    f = image_features(frames)
    assert f.shape == (4, 64 * 3 + 8 * 8 * 3)
    m = REGION.to_array(32, 32)
    changed = np.stack([bbox_outside_changed(x) for x in frames])
    np.testing.assert_array_equal(image_features(changed, m), image_features(frames, m))


def test_sync_proxy_oracles():
    clip = make_clip(SpriteIdentity(2), 4, 4.0, 32)
    r = sync_proxy(clip.frames, clip.audio)
    assert r == pytest.approx(1.0, abs=1e-3)
    ap = np.linspace(0, 1, 50) ** 2
    env = np.sin(np.arange(50)) ** 2
    assert pearson(-ap, env) == pytest.approx(-pearson(ap, env))
    assert pearson(ap, ap) == pytest.approx(1.0)
    assert pearson(-ap, ap) == pytest.approx(-1.0)
    with pytest.raises(UndefinedCorrelationError):
        pearson(np.ones(10), np.arange(10))


def test_sync_proxy_independent_envelope():
    rng = np.random.default_rng(9)
    ap = rng.random(1000)
    env = rng.random(1000)
    # permutation oracle for the null distribution of |r|
    null = np.array([abs(pearson(ap, rng.permutation(env))) for _ in range(2000)])
    assert np.quantile(null, 0.99) < 0.1
    assert abs(pearson(ap, env)) < 0.1


def test_evaluate_clip_identical_and_region():
    clip = make_clip(SpriteIdentity(1), 2, 1.0, 32)
    masks = np.stack([REGION.to_array(32, 32)] * len(clip.frames))
    row = evaluate_clip(clip.frames, clip.frames, masks, clip.audio, "c")
    assert row["ssim"] == 1.0 and row["psnr_db"] == 100.0 and row["frechet"] == 0.0
    assert row["sync_proxy_r"] == pytest.approx(1.0, abs=1e-3)
    silent = evaluate_clip(clip.frames, clip.frames, masks, Waveform(np.zeros(16000), 16000), "s")
    assert silent["sync_proxy_r"] is None


def test_report_outputs(tmp_path):
    rows = [{"clip": "a", "n_frames": 3, "ssim": 0.5, "psnr_db": 20.0, "cpbd": 0.4, "frechet": 1.0, "sync_proxy_r": None},
            {"clip": "b", "n_frames": 3, "ssim": 0.7, "psnr_db": 30.0, "cpbd": 0.6, "frechet": 3.0, "sync_proxy_r": 0.5}]
    rep = MetricReport("masked_region", rows, frechet_all=2.0, fingerprint="f", seed=1)
    agg = rep.aggregates()
    assert agg["ssim"] == pytest.approx(0.6) and agg["sync_proxy_r"] == 0.5
    j, c = rep.write(tmp_path / "a")
    rep.write(tmp_path / "b")
    assert j.read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    lines = c.read_text().splitlines()
    assert lines[0] == "clip,n_frames,ssim,psnr_db,cpbd,frechet,sync_proxy_r"
    assert lines[1].endswith(",")
    with pytest.raises(ValueError):
        MetricReport("whole")
