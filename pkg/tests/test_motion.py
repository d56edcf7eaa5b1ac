from dataclasses import replace

import numpy as np
import pytest
import torch

from lipmotion.core_types import (
    ConfigurationError,
    DiffusionSchedule,
    LandmarkSequence,
    ValidationError,
    scaled_schedule,
)
from lipmotion.identity import IdentityExtractor, IdentityExtractorConfig, embed
from lipmotion.motion import (
    MotionDiffusion,
    MotionModelConfig,
    backbone_forward,
    dm_loss,
    dm_loss_terms,
    forward_noise,
    forward_noise_step,
    load_motion,
    make_batch,
    sample,
    sample_batch,
    train_motion,
)
from lipmotion.synth_data import landmarks_from, sample_identity, synth_speech

from fdcheck import fd_relative_error

TINY = MotionModelConfig(conformer_layers=1, hidden_dim=32, ffn_dim=64, heads=2, audio_encoder_layers=1,
                         audio_heads=2, diffusion_steps=20, epochs=2, batch_size=4, dropout=0.0)


class PointMassOracle:
    """Exact denoiser when every sample equals ``value``; records the x_t it is fed."""

    def __init__(self, topo, value):
        self.topology = topo
        self.value = value
        self.seen = {}

    def to_norm(self, low):
        return low.reshape(low.shape[0], low.shape[1], -1)

    def denoise(self, x, t, *args):
        self.seen[int(t[0])] = x.detach().clone()
        return torch.full((x.shape[0], x.shape[1], x.shape[2] // 2, 2), self.value)


def _source(topo, n=10, seed=0):
    ident = sample_identity(seed, 1)
    sp = synth_speech(n, seed + 5)
    return landmarks_from(ident, sp, topo, clip_seed=seed), sp


def test_forward_noise_terminal_is_standard_normal():
    s = scaled_schedule(100)
    assert s.alpha_bar[-1] < 1e-3
    rng = np.random.default_rng(0)
    m0 = rng.uniform(-1, 1, 100_000)
    x = forward_noise(m0, s.T - 1, s, rng.standard_normal(100_000))
    assert abs(x.mean()) < 0.02 and abs(x.std() - 1) < 0.02


def test_k_step_composition_matches_closed_form():
    s = scaled_schedule(100)
    for k in (1, 7, 50, 100):
        coef, var = 1.0, 0.0
        for t in range(k):
            a = forward_noise_step(1.0, s.alpha[t], 0.0)
            b = forward_noise_step(0.0, s.alpha[t], 1.0)
            coef, var = a * coef, a * a * var + b * b
        assert coef == pytest.approx(np.sqrt(s.alpha_bar[k - 1]), abs=1e-4)
        assert var == pytest.approx(1 - s.alpha_bar[k - 1], abs=1e-4)
    # the same by simulation
    rng = np.random.default_rng(1)
    m = np.full(100_000, 0.7)
    for t in range(30):
        m = forward_noise_step(m, s.alpha[t], rng.standard_normal(m.size))
    assert m.mean() == pytest.approx(0.7 * np.sqrt(s.alpha_bar[29]), abs=0.01)
    assert m.var() == pytest.approx(1 - s.alpha_bar[29], abs=0.01)


def test_forward_noise_rejects_bad_step():
    with pytest.raises(ValidationError):
        forward_noise(np.zeros(3), 100, scaled_schedule(100), np.zeros(3))


def test_sampler_single_step_returns_prediction(topo):
    seq, sp = _source(topo)
    sched = DiffusionSchedule(np.array([5e-4]))
    out = sample(sp.audio_feats, seq, None, sched, PointMassOracle(topo, 0.25), rng_seed=0)
    assert np.all(out.coords[:, topo.lower_compact_idx] == np.float32(0.25))
    np.testing.assert_array_equal(out.coords[:, topo.copied_idx], seq.coords[:, topo.copied_idx])


def test_sampler_marginals_match_forward_process(topo):
    """For point-mass data the reverse chain must reproduce q(x_t | x0) at every step."""
    sched = scaled_schedule(100)
    c = 0.6
    oracle = PointMassOracle(topo, c)
    seqs = [_source(topo, n=50, seed=i)[0] for i in range(40)]
    speech = [np.zeros((100, 16), np.float32)] * 40
    out = sample_batch(oracle, make_batch(seqs, speech, None), sched, rng_seed=3)
    assert np.all(out[:, :, topo.lower_compact_idx] == np.float32(c))
    for t in (99, 70, 30, 5, 1):
        x = oracle.seen[t].double()
        assert float(x.mean()) == pytest.approx(np.sqrt(sched.alpha_bar[t]) * c, abs=0.01)
        assert float(x.var()) == pytest.approx(1 - sched.alpha_bar[t], abs=0.01)


def test_model_shapes_and_zero_init(topo):
    cfg = MotionModelConfig()
    m = MotionDiffusion(cfg, topo).eval()
    m.low_mean.fill_(0.1)
    x = torch.randn(2, 6, m.n_low)
    up = torch.randn(2, 6, 15, 2) * 0.2
    out = m(x, torch.tensor([3, 50]), up, torch.randn(2, 12, 16), torch.nn.functional.normalize(torch.randn(2, 64)))
    assert out.shape == (2, 6, 42)
    # zero-initialized head: the model starts at the data mean
    den = m.denoise(x, torch.tensor([3, 50]), up, torch.randn(2, 12, 16), torch.randn(2, 64))
    assert torch.allclose(den, torch.full_like(den, 0.1))


def test_model_input_errors(topo):
    m = MotionDiffusion(TINY, topo).eval()
    with pytest.raises(ValidationError):
        m(torch.zeros(1, 251, 42), torch.tensor([0]), torch.zeros(1, 251, 15, 2), torch.zeros(1, 502, 16),
          torch.zeros(1, 64))
    with pytest.raises(ValidationError):
        m(torch.zeros(1, 4, 42), torch.tensor([0]), torch.zeros(1, 4, 15, 2), torch.zeros(1, 6, 16), torch.zeros(1, 64))
    with pytest.raises(ValidationError):
        m(torch.zeros(1, 4, 42), torch.tensor([0]), torch.zeros(1, 4, 15, 2), torch.zeros(1, 8, 16), None)
    with pytest.raises(ValidationError):
        MotionModelConfig(cond_mode="nope")


@pytest.mark.parametrize("mode", ["concat_key_landmark", "add_key_landmark", "key_landmark_cross_attention"])
def test_key_landmark_modes_forward(topo, mode):
    m = MotionDiffusion(replace(TINY, cond_mode=mode), topo).eval()
    out = m(torch.zeros(2, 4, 42), torch.tensor([0, 1]), torch.zeros(2, 4, 15, 2), torch.zeros(2, 8, 16), None,
            torch.zeros(2, 48, 2))
    assert out.shape == (2, 4, 42)


def test_dm_loss_terms_gradients(topo):
    torch.manual_seed(0)
    ext = IdentityExtractor(IdentityExtractorConfig()).eval()
    seq, _ = _source(topo, n=6)
    m0 = torch.tensor(np.array(seq.coords))[None]
    m_hat = (m0 + 0.05 * torch.randn_like(m0)).detach()

    def mse(x):
        return dm_loss_terms(x, m0, ext)[1]

    def idt(x):
        return dm_loss_terms(x, m0, ext)[2]

    assert fd_relative_error(mse, m_hat, 1e-2) < 1e-2
    assert fd_relative_error(idt, m_hat, 1e-2) < 1e-2


def test_dm_loss_values(topo):
    ext = IdentityExtractor(IdentityExtractorConfig()).eval()
    seq, _ = _source(topo, n=5)
    total, mse, idt = dm_loss(seq, seq, ext)
    assert mse == 0.0 and idt == pytest.approx(0.0, abs=1e-3)
    shifted = LandmarkSequence(np.array(seq.coords) + 0.1, topo)
    total, mse, idt = dm_loss(shifted, seq, ext, id_weight=2.0)
    assert mse == pytest.approx(48 * 2 * 0.01, rel=1e-4)
    assert total == pytest.approx(mse + 2.0 * idt, rel=1e-6)


def test_backbone_gradient_wrt_identity(topo):
    torch.manual_seed(0)
    m = MotionDiffusion(MotionModelConfig(), topo).eval()
    torch.nn.init.normal_(m.out.weight, std=0.05)
    x = torch.randn(1, 8, 42)
    up = torch.randn(1, 8, 15, 2) * 0.2
    audio = torch.randn(1, 16, 16)
    w = torch.randn(1, 8, 42)
    z = torch.nn.functional.normalize(torch.randn(1, 64), dim=-1)

    def f(zid):
        return (m(x, torch.tensor([10]), up, audio, zid) * w).sum()

    assert fd_relative_error(f, z, 1e-2) < 1e-2


def test_backbone_forward_wrapper(topo, small_ds):
    c = small_ds.clips[0]
    m = MotionDiffusion(TINY, topo)
    ext = IdentityExtractor(IdentityExtractorConfig())
    out = backbone_forward(np.zeros((12, 42)), c.landmarks.coords[:, topo.upper_compact_idx], 5,
                           c.speech.audio_feats, embed(c.landmarks.coords[0], ext), m)
    assert out.shape == (12, 21, 2)


def test_train_requires_identity(small_ds):
    with pytest.raises(ConfigurationError):
        train_motion(small_ds, TINY, None)


def test_train_checkpoint_and_sampling(small_ds, tmp_path, topo):
    ext = IdentityExtractor(IdentityExtractorConfig()).eval()
    model, hist = train_motion(small_ds, TINY, ext, tmp_path / "m", log_every=0)
    assert len(hist) == 2 and {"total", "mse", "id"} <= set(hist[0])
    loaded = load_motion(tmp_path / "m")
    c = small_ds.split("holdout")[0]
    z = embed(c.landmarks.coords[0], ext)
    sched = scaled_schedule(TINY.diffusion_steps)
    a = sample(c.speech.audio_feats, c.landmarks, z, sched, model, 7)
    b = sample(c.speech.audio_feats, c.landmarks, z, sched, loaded, 7)
    np.testing.assert_array_equal(a.coords, b.coords)
    np.testing.assert_array_equal(a.coords[:, topo.copied_idx], c.landmarks.coords[:, topo.copied_idx])
    d = sample(c.speech.audio_feats, c.landmarks, z, sched, model, 8)
    assert not np.array_equal(a.coords, d.coords)


def test_train_deterministic(small_ds):
    ext = IdentityExtractor(IdentityExtractorConfig()).eval()
    cfg = replace(TINY, epochs=1)
    h1 = train_motion(small_ds, cfg, ext, log_every=0)[1]
    h2 = train_motion(small_ds, cfg, ext, log_every=0)[1]
    assert h1[0]["total"] == pytest.approx(h2[0]["total"], abs=1e-6)
