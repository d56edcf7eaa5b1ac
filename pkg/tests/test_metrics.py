import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lipmotion.core_types import ConfigurationError, ValidationError
from lipmotion.metrics import (
    ABLATION_SUITES,
    EvalReport,
    IdentityProbe,
    format_table,
    id_sim,
    image_lip_extent,
    landmark_aperture,
    pearson,
    psnr,
    run_ablation,
    ssim,
    sync_corr,
)
from lipmotion.regions import frame_lip_mask


def psnr_loop(a, b):
    h, w = len(a), len(a[0])
    total = 0.0
    for i in range(h):
        for j in range(w):
            total += (float(a[i][j]) - float(b[i][j])) ** 2
    mse = total / (h * w)
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)


def ssim_loop(a, b, win=7, sigma=1.5):
    h, w = len(a), len(a[0])
    g = [[math.exp(-((i - (win - 1) / 2) ** 2 + (j - (win - 1) / 2) ** 2) / (2 * sigma * sigma))
          for j in range(win)] for i in range(win)]
    gs = sum(sum(r) for r in g)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for y in range(h - win + 1):
        for x in range(w - win + 1):
            ma = mb = saa = sbb = sab = 0.0
            for i in range(win):
                for j in range(win):
                    k = g[i][j] / gs
                    p, q = float(a[y + i][x + j]), float(b[y + i][x + j])
                    ma += k * p
                    mb += k * q
                    saa += k * p * p
                    sbb += k * q * q
                    sab += k * p * q
            va, vb, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


@given(hnp.arrays(np.float64, (8, 8), elements=st.floats(0, 1)), hnp.arrays(np.float64, (8, 8), elements=st.floats(0, 1)))
@settings(max_examples=30, deadline=None)
def test_psnr_ssim_match_scalar_loops(a, b):
    assert psnr(a, b) == pytest.approx(min(99.0, psnr_loop(a, b)), abs=1e-6)
    assert ssim(a, b, window=7) == pytest.approx(ssim_loop(a, b), abs=1e-6)


def test_psnr_known_values():
    a = np.zeros((4, 4))
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(a, a + 1.0) == pytest.approx(0.0)
    assert psnr(a, a) == 99.0


def test_ssim_identity_symmetry_and_inversion(rng):
    a = rng.uniform(0, 1, (16, 16, 3))
    b = rng.uniform(0, 1, (16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(a, b) == pytest.approx(ssim(b, a))
    assert ssim(a, 1 - a) < 0
    with pytest.raises(ValidationError):
        ssim(np.zeros((5, 5)), np.zeros((5, 5)), window=7)
    with pytest.raises(ValidationError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_pearson_zero_variance_warns():
    with pytest.warns(RuntimeWarning):
        assert math.isnan(pearson(np.ones(5), np.arange(5.0)))


def test_sync_corr_ground_truth_landmarks(small_ds):
    for c in small_ds.clips:
        assert sync_corr(c.landmarks, c.speech) > 0.95


def test_sync_corr_affine_invariant(small_ds, topo):
    c = small_ds.clips[0]
    base = sync_corr(c.landmarks.coords, c.speech.energy, topo)
    scaled = np.asarray(c.landmarks.coords) * 0.5 + 0.1
    assert sync_corr(scaled, c.speech.energy * 3 + 2, topo) == pytest.approx(base, abs=1e-9)


def test_sync_corr_shuffled_baseline_is_low(tmp_path):
    from lipmotion.synth_data import load_dataset, make_dataset
    ds = load_dataset(make_dataset(tmp_path, n_ids=2, clips_per_id=2, frames_per_clip=100, seed=5))
    rng = np.random.default_rng(0)
    vals = [sync_corr(c.landmarks, rng.permutation(c.speech.energy)) for c in ds.clips]
    assert abs(np.mean(vals)) < 0.3


def test_sync_corr_on_rendered_frames(small_ds, topo):
    for c in small_ds.clips[:4]:
        region = frame_lip_mask(c.landmarks.coords, topo, c.frames.shape[1]).mask
        assert sync_corr(c.frames, c.speech, region=region) > 0.8


def test_image_lip_extent_nonnegative(small_ds, topo):
    c = small_ds.clips[0]
    region = frame_lip_mask(c.landmarks.coords, topo, 64).mask
    ext = image_lip_extent(c.frames, region)
    assert ext.shape == (c.n_frames,) and np.all(ext >= 0)


def test_landmark_aperture_shape(small_ds, topo):
    c = small_ds.clips[0]
    assert landmark_aperture(c.landmarks.coords, topo).shape == (c.n_frames,)


def test_sync_corr_input_checks(small_ds):
    c = small_ds.clips[0]
    with pytest.raises(ValidationError):
        sync_corr(np.asarray(c.landmarks.coords), c.speech)
    with pytest.raises(ValidationError):
        sync_corr(c.frames, c.speech)
    with pytest.raises(ValidationError):
        sync_corr(c.landmarks, c.speech.energy[:-1])


def test_untrained_probe_refused(small_ds):
    c = small_ds.clips[0]
    with pytest.raises(ConfigurationError):
        id_sim(c.frames, c.frames, IdentityProbe(4))


def test_id_sim_self_is_one(small_ds):
    p = IdentityProbe(4)
    p.trained.fill_(1.0)
    c = small_ds.clips[0]
    assert id_sim(c.frames, c.frames, p) == pytest.approx(1.0, abs=1e-5)


def test_report_renders():
    r = EvalReport.from_clips([{"clip": "a", "psnr": 30.0, "ssim": 0.9, "id_sim": None, "sync_corr": float("nan")}])
    txt = r.to_text()
    assert txt.startswith("# sync_corr")
    assert "MEAN" in txt and "nan" in txt
    assert math.isnan(r.id_sim)
    assert format_table([{"x": 1}], ["x", "y"]).splitlines()[-1].split() == ["1", "-"]


def test_ablation_isolates_failures(small_ds):
    assert set(ABLATION_SUITES) == {"cond_modes", "id_loss_weights", "reference_modes"}
    report = run_ablation("id_loss_weights", small_ds, id_extractor=None)
    assert len(report["rows"]) == 3
    assert all(r["error"].startswith("ConfigurationError") for r in report["rows"])
    with pytest.raises(ValidationError):
        run_ablation("nope", small_ds)


def test_nonlip_l1_ignores_masked_pixels():
    from lipmotion.metrics import nonlip_l1

    a = np.zeros((2, 4, 4, 3))
    b = a.copy()
    m = np.zeros((2, 4, 4))
    m[:, 1:3, 1:3] = 1
    b[:, 1:3, 1:3] = 1.0
    assert nonlip_l1(a, b, m) == 0.0
    b[:, 0, 0] = 0.6
    assert nonlip_l1(a, b, m) == pytest.approx(0.6 * 2 * 3 / (2 * 12 * 3))
    with pytest.raises(ValidationError):
        nonlip_l1(a, b, m[0])
