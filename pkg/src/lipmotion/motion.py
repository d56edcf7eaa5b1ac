"""Stage 1: speech-conditioned diffusion over lower-face compact landmarks.

The backbone predicts the clean sample (x0 parameterization). Diffusion runs
in a per-coordinate standardized space; the backbone returns coordinates.
Upper-face compact points are prepended as prefix tokens, and every point
outside ``compact & lower`` is copied from the source by the sampler.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conformer import AudioEncoder, ConformerLayer
from .core_types import (
    MAX_SEQ_LEN,
    ConfigurationError,
    DiffusionSchedule,
    IdentityEmbedding,
    LandmarkSequence,
    LandmarkTopology,
    SpeechFeature,
    ValidationError,
    load_topology,
    scaled_schedule,
)
from .nn_utils import inverse_sqrt_lambda, load_meta, load_state, save_checkpoint, seed_everything, sinusoidal_embedding

log = logging.getLogger(__name__)

COND_MODES = ("id_cross_attention", "concat_key_landmark", "add_key_landmark", "key_landmark_cross_attention")


@dataclass(frozen=True)
class MotionModelConfig:
    conformer_layers: int = 4
    hidden_dim: int = 128
    ffn_dim: int = 256
    heads: int = 4
    conv_kernel: int = 5
    dropout: float = 0.1
    audio_encoder_layers: int = 2
    audio_heads: int = 4
    audio_kernel: int = 7
    audio_downsample: tuple = (3, 2, 1)
    cond_mode: str = "id_cross_attention"
    id_tokens: int = 4
    speech_dim: int = 16
    id_dim: int = 64
    topology: str = "desk-48"
    diffusion_steps: int = 100
    id_weight: float = 1.0
    epochs: int = 200
    batch_size: int = 6
    lr: float = 1e-3
    warmup_steps: int = 100
    reference_frame_idx: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.cond_mode not in COND_MODES:
            raise ValidationError(f"cond_mode must be one of {COND_MODES}")
        object.__setattr__(self, "audio_downsample", tuple(self.audio_downsample))


MOTION_PRESETS = {
    "desk": MotionModelConfig(),
    "paper": MotionModelConfig(conformer_layers=12, hidden_dim=768, ffn_dim=2048, heads=12, conv_kernel=5,
                               dropout=0.1, audio_encoder_layers=4, audio_heads=8, audio_kernel=13,
                               id_dim=256, topology="paper-669", diffusion_steps=1000, epochs=3500,
                               lr=1e-4, speech_dim=768),
}


def schedule_for(cfg: MotionModelConfig) -> DiffusionSchedule:
    return scaled_schedule(cfg.diffusion_steps)


# --------------------------------------------------------------------------
# forward process


def forward_noise(m0, t: int, schedule: DiffusionSchedule, noise):
    """Closed-form jump to step ``t``: sqrt(abar_t) * m0 + sqrt(1 - abar_t) * noise."""
    if not 0 <= int(t) < schedule.T:
        raise ValidationError(f"t={t} outside [0, {schedule.T})")
    ab = float(schedule.alpha_bar[int(t)])
    return np.sqrt(ab) * m0 + np.sqrt(1.0 - ab) * noise


def forward_noise_step(m_prev, alpha_t: float, noise):
    """One transition of the forward chain: N(sqrt(alpha_t) * m_prev, (1 - alpha_t) I)."""
    return np.sqrt(alpha_t) * m_prev + np.sqrt(1.0 - alpha_t) * noise


# --------------------------------------------------------------------------
# backbone


class MotionDiffusion(nn.Module):
    def __init__(self, cfg: MotionModelConfig, topology: LandmarkTopology | None = None):
        super().__init__()
        self.cfg = cfg
        self.topology = topology or load_topology(cfg.topology)
        if self.topology.name != cfg.topology:
            raise ConfigurationError(f"config topology {cfg.topology} != {self.topology.name}")
        d = cfg.hidden_dim
        self.n_low = len(self.topology.lower_compact_idx) * 2
        self.n_up = len(self.topology.upper_compact_idx) * 2
        self.n_key = self.topology.total_points * 2
        tok_in = self.n_low + self.n_up + (self.n_key if cfg.cond_mode == "concat_key_landmark" else 0)
        self.inp = nn.Linear(tok_in, d)
        self.segment = nn.Embedding(2, d)
        self.t_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        k, s, p = cfg.audio_downsample
        self.audio = AudioEncoder(cfg.speech_dim, d, cfg.ffn_dim, cfg.audio_heads, cfg.audio_kernel,
                                  cfg.audio_encoder_layers, cfg.dropout, k, s, p)
        self.speech_proj = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        cross = cfg.cond_mode in ("id_cross_attention", "key_landmark_cross_attention")
        if cfg.cond_mode == "id_cross_attention":
            self.id_proj = nn.Sequential(nn.Linear(cfg.id_dim, d), nn.SiLU(), nn.Linear(d, cfg.id_tokens * d))
        elif cfg.cond_mode == "add_key_landmark":
            self.key_proj = nn.Sequential(nn.Linear(self.n_key, d), nn.SiLU(), nn.Linear(d, d))
        elif cfg.cond_mode == "key_landmark_cross_attention":
            self.key_point = nn.Linear(2, d)
            self.key_pos = nn.Parameter(torch.randn(self.topology.total_points, d) * 0.02)
        self.layers = nn.ModuleList(
            [ConformerLayer(d, cfg.ffn_dim, cfg.heads, cfg.conv_kernel, cfg.dropout, cross_attention=cross)
             for _ in range(cfg.conformer_layers)]
        )
        self.out_norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, self.n_low)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.register_buffer("low_mean", torch.zeros(self.n_low))
        self.register_buffer("low_std", torch.ones(self.n_low))
        self.register_buffer("up_mean", torch.zeros(self.n_up))
        self.register_buffer("up_std", torch.ones(self.n_up))

    # ---- data space ------------------------------------------------------

    def set_data_stats(self, coords: np.ndarray) -> None:
        """Standardization stats from full-frame training landmarks [..., L, 2]."""
        c = torch.as_tensor(coords, dtype=torch.float32).reshape(-1, self.topology.total_points, 2)
        low = c[:, self.topology.lower_compact_idx].reshape(len(c), -1)
        up = c[:, self.topology.upper_compact_idx].reshape(len(c), -1)
        self.low_mean.copy_(low.mean(0))
        self.low_std.copy_(low.std(0).clamp_min(1e-3))
        self.up_mean.copy_(up.mean(0))
        self.up_std.copy_(up.std(0).clamp_min(1e-3))

    def to_norm(self, low_coords: torch.Tensor) -> torch.Tensor:
        """[B, N, P, 2] lower-compact coords -> [B, N, 2P] standardized."""
        b, n = low_coords.shape[:2]
        return (low_coords.reshape(b, n, -1) - self.low_mean) / self.low_std

    def from_norm(self, x: torch.Tensor) -> torch.Tensor:
        b, n = x.shape[:2]
        return (x * self.low_std + self.low_mean).reshape(b, n, -1, 2)

    # ---- network ---------------------------------------------------------

    def _context(self, z_id, key):
        mode = self.cfg.cond_mode
        if mode == "id_cross_attention":
            if z_id is None:
                raise ValidationError("id_cross_attention needs an identity embedding")
            return self.id_proj(z_id).reshape(z_id.shape[0], self.cfg.id_tokens, -1)
        if mode == "key_landmark_cross_attention":
            return self.key_point(key) + self.key_pos
        return None

    def forward(self, x_t, t, upper, audio, z_id=None, key=None):
        """Predict standardized x0 for the lower-compact block.

        x_t [B, N, 2P] standardized noisy sample; t [B] step indices;
        upper [B, N, Q, 2] upper-face compact coords; audio [B, 2N, D_s];
        z_id [B, D_id]; key [B, L, 2] reference landmark frame.
        """
        b, n, _ = x_t.shape
        if n > MAX_SEQ_LEN:
            raise ValidationError(f"sequence of {n} frames exceeds max_seq_len={MAX_SEQ_LEN}")
        if audio.shape[1] != 2 * n:
            raise ValidationError(f"expected {2 * n} audio rows for {n} frames, got {audio.shape[1]}")
        mode = self.cfg.cond_mode
        if mode != "id_cross_attention" and key is None:
            raise ValidationError(f"{mode} needs a key landmark frame")
        up = (upper.reshape(b, n, -1) - self.up_mean) / self.up_std
        zeros_low = x_t.new_zeros(b, n, self.n_low)
        zeros_up = x_t.new_zeros(b, n, self.n_up)
        prefix = torch.cat([zeros_low, up], -1)
        noisy = torch.cat([x_t, zeros_up], -1)
        tokens = torch.cat([prefix, noisy], 1)
        if mode == "concat_key_landmark":
            tokens = torch.cat([tokens, key.reshape(b, 1, -1).expand(b, 2 * n, -1)], -1)
        h = self.inp(tokens)
        pos = sinusoidal_embedding(torch.arange(n, device=x_t.device), h.shape[-1]).to(h.dtype)
        seg = self.segment(torch.cat([torch.zeros(n, dtype=torch.long), torch.ones(n, dtype=torch.long)]))
        h = h + torch.cat([pos, pos], 0) + seg
        if mode == "add_key_landmark":
            h = h + self.key_proj(key.reshape(b, -1))[:, None, :]
        t_emb = self.t_mlp(sinusoidal_embedding(torch.as_tensor(t).reshape(b), h.shape[-1]).to(h.dtype))[:, None, :]
        speech = self.speech_proj(self.audio(audio))
        speech = torch.cat([torch.zeros_like(speech), speech], 1)
        ctx = self._context(z_id, key)
        for layer in self.layers:
            h = layer(h + t_emb + speech, ctx)
        return self.out(self.out_norm(h[:, n:]))

    def denoise(self, x_t, t, upper, audio, z_id=None, key=None):
        """Coordinate-space estimate of the clean lower-compact landmarks [B, N, P, 2]."""
        return self.from_norm(self(x_t, t, upper, audio, z_id, key))


def backbone_forward(m_t_lower, upper_prefix, t: int, speech: SpeechFeature, z_id: IdentityEmbedding | None,
                     model: MotionDiffusion, key_frame=None) -> np.ndarray:
    """Single-clip convenience wrapper around ``model.denoise`` (eval mode, numpy in/out).

    ``m_t_lower`` is the standardized noisy block [N, 2P]; returns [N, P, 2].
    """
    model.eval()
    x = torch.tensor(np.asarray(m_t_lower), dtype=torch.float32)[None]
    up = torch.tensor(np.asarray(upper_prefix), dtype=torch.float32)[None]
    audio = torch.tensor(speech.audio_rate(), dtype=torch.float32)[None]
    zid = None if z_id is None else torch.tensor(z_id.vec)[None]
    key = None if key_frame is None else torch.tensor(np.asarray(key_frame), dtype=torch.float32)[None]
    with torch.no_grad():
        out = model.denoise(x, torch.tensor([int(t)]), up, audio, zid, key)
    return out[0].numpy()


# --------------------------------------------------------------------------
# loss


def dm_loss_terms(m0_hat_full: torch.Tensor, m0_full: torch.Tensor, extractor, reference_frame_idx: int = 0,
                  id_weight: float = 1.0, z_ref: torch.Tensor | None = None, frame_mask=None):
    """Reconstruction + identity objective on full landmark frames [B, N, L, 2].

    mse: squared L2 norm over all coordinates of a frame, averaged over frames.
    id: mean over frames of |1 - cos(embed(generated frame), embed(reference frame))|.
    """
    sq = ((m0_hat_full - m0_full) ** 2).sum(dim=(-1, -2))
    if z_ref is None:
        z_ref = extractor(m0_full[:, reference_frame_idx])
    emb = extractor(m0_hat_full)
    cos = (emb * z_ref[:, None, :]).sum(-1)
    idt = (1.0 - cos).abs()
    if frame_mask is not None:
        w = frame_mask.float()
        mse = (sq * w).sum() / w.sum()
        id_term = (idt * w).sum() / w.sum()
    else:
        mse, id_term = sq.mean(), idt.mean()
    return mse + id_weight * id_term, mse, id_term


def dm_loss(m0_hat: LandmarkSequence, m0: LandmarkSequence, id_extractor, reference_frame_idx: int = 0,
            id_weight: float = 1.0):
    with torch.no_grad():
        total, mse, idt = dm_loss_terms(torch.tensor(m0_hat.coords)[None], torch.tensor(m0.coords)[None],
                                        id_extractor, reference_frame_idx, id_weight)
    return float(total), float(mse), float(idt)


def _scatter_lower(full: torch.Tensor, low: torch.Tensor, idx: np.ndarray) -> torch.Tensor:
    out = full.clone()
    out[:, :, torch.tensor(idx)] = low
    return out


# --------------------------------------------------------------------------
# sampling


@dataclass
class ClipBatch:
    """Tensors for a batch of equal-length clips."""

    full: torch.Tensor  # [B, N, L, 2]
    audio: torch.Tensor  # [B, 2N, D_s]
    z_id: torch.Tensor | None  # [B, D_id]
    key: torch.Tensor  # [B, L, 2]

    def upper(self, topo: LandmarkTopology) -> torch.Tensor:
        return self.full[:, :, torch.tensor(topo.upper_compact_idx)]

    def lower(self, topo: LandmarkTopology) -> torch.Tensor:
        return self.full[:, :, torch.tensor(topo.lower_compact_idx)]


def make_batch(sources, speeches, z_ids, reference_frame_idx: int = 0) -> ClipBatch:
    full = torch.as_tensor(np.stack([np.asarray(s.coords if isinstance(s, LandmarkSequence) else s)
                                     for s in sources]), dtype=torch.float32)
    audio = torch.as_tensor(np.stack([sp.audio_rate() if isinstance(sp, SpeechFeature) else sp
                                      for sp in speeches]), dtype=torch.float32)
    if audio.shape[1] != 2 * full.shape[1]:
        raise ValidationError("speech rows do not align with landmark frames")
    zid = None
    if z_ids is not None:
        zid = torch.as_tensor(np.stack([z.vec if isinstance(z, IdentityEmbedding) else z for z in z_ids]),
                              dtype=torch.float32)
    return ClipBatch(full, audio, zid, full[:, reference_frame_idx].clone())


@torch.no_grad()
def sample_batch(model, batch: ClipBatch, schedule: DiffusionSchedule, rng_seed: int) -> np.ndarray:
    """Ancestral sampling from Gaussian noise; returns full landmarks [B, N, L, 2].

    Only the lower-compact block is generated; every other point is the
    source's own value.
    """
    if hasattr(model, "eval"):
        model.eval()
    topo = model.topology
    gen = torch.Generator().manual_seed(int(rng_seed))
    b, n = batch.full.shape[:2]
    p = len(topo.lower_compact_idx)
    upper = batch.upper(topo)
    x = torch.randn(b, n, 2 * p, generator=gen)
    ab = torch.tensor(np.array(schedule.alpha_bar), dtype=torch.float64)
    ab_prev = torch.tensor(np.array(schedule.alpha_bar_prev), dtype=torch.float64)
    beta = torch.tensor(np.array(schedule.beta), dtype=torch.float64)
    alpha = torch.tensor(np.array(schedule.alpha), dtype=torch.float64)
    m0 = None
    for t in range(schedule.T - 1, -1, -1):
        tt = torch.full((b,), t, dtype=torch.long)
        m0 = model.denoise(x, tt, upper, batch.audio, batch.z_id, batch.key)
        if t == 0:
            break
        x0 = model.to_norm(m0).double()
        c0 = ab_prev[t].sqrt() * beta[t] / (1 - ab[t])
        ct = alpha[t].sqrt() * (1 - ab_prev[t]) / (1 - ab[t])
        var = beta[t] * (1 - ab_prev[t]) / (1 - ab[t])
        mean = c0 * x0 + ct * x.double()
        x = (mean + var.sqrt() * torch.randn(x.shape, generator=gen, dtype=torch.float64)).float()
    out = batch.full.clone().numpy()
    out[:, :, topo.lower_compact_idx] = m0.numpy()
    return out


def sample(speech: SpeechFeature, source: LandmarkSequence, z_id: IdentityEmbedding | None,
           schedule: DiffusionSchedule, model, rng_seed: int, reference_frame_idx: int = 0) -> LandmarkSequence:
    """Generate a lip-synced landmark sequence for ``source`` driven by ``speech``."""
    batch = make_batch([source], [speech], None if z_id is None else [z_id], reference_frame_idx)
    out = sample_batch(model, batch, schedule, rng_seed)
    return LandmarkSequence(out[0], source.topology, source.valid_len)


# --------------------------------------------------------------------------
# training


def _clip_tensors(clips, extractor, ref_idx):
    full = np.stack([c.landmarks.coords for c in clips])
    audio = np.stack([c.speech.audio_feats.feats for c in clips])
    with torch.no_grad():
        z = extractor(torch.as_tensor(full[:, ref_idx])).numpy()
    return ClipBatch(torch.as_tensor(full), torch.as_tensor(audio), torch.as_tensor(z),
                     torch.as_tensor(full[:, ref_idx]))


def train_motion(dataset, config: MotionModelConfig | None = None, id_extractor=None, out_dir=None,
                 log_every: int = 10):
    """Train the landmark diffusion model on the dataset's train split.

    Returns (model, history) with one {total, mse, id} record per epoch.
    """
    config = config or MotionModelConfig()
    if id_extractor is None:
        raise ConfigurationError("motion training needs a trained identity extractor checkpoint")
    if id_extractor.cfg.topology != config.topology:
        raise ConfigurationError(
            f"identity extractor topology {id_extractor.cfg.topology} != motion topology {config.topology}")
    config = replace(config, id_dim=id_extractor.cfg.embed_dim)
    for prm in id_extractor.parameters():
        prm.requires_grad_(False)
    id_extractor.eval()
    gen = seed_everything(config.seed)
    topo = load_topology(config.topology)
    train = dataset.split("train")
    data = _clip_tensors(train, id_extractor, config.reference_frame_idx)
    model = MotionDiffusion(config, topo)
    model.set_data_stats(data.full.numpy())
    schedule = schedule_for(config)
    ab = torch.tensor(np.array(schedule.alpha_bar), dtype=torch.float32)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, inverse_sqrt_lambda(config.warmup_steps))
    n_clips = data.full.shape[0]
    low_idx = topo.lower_compact_idx
    history = []
    t0 = time.time()
    for epoch in range(config.epochs):
        model.train()
        perm = torch.randperm(n_clips, generator=gen)
        sums = np.zeros(3)
        for i in range(0, n_clips, config.batch_size):
            idx = perm[i: i + config.batch_size]
            full = data.full[idx]
            b = len(idx)
            x0 = model.to_norm(full[:, :, torch.tensor(low_idx)])
            t = torch.randint(0, schedule.T, (b,), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            a = ab[t][:, None, None]
            xt = a.sqrt() * x0 + (1 - a).sqrt() * eps
            zid = data.z_id[idx] if config.cond_mode == "id_cross_attention" else None
            m0_hat = model.denoise(xt, t, full[:, :, torch.tensor(topo.upper_compact_idx)], data.audio[idx],
                                   zid, data.key[idx])
            full_hat = _scatter_lower(full, m0_hat, low_idx)
            total, mse, idt = dm_loss_terms(full_hat, full, id_extractor, config.reference_frame_idx,
                                            config.id_weight, z_ref=data.z_id[idx])
            opt.zero_grad()
            total.backward()
            opt.step()
            sched.step()
            sums += np.array([float(total.detach()), float(mse.detach()), float(idt.detach())]) * b
        rec = dict(zip(("total", "mse", "id"), (sums / n_clips).tolist()))
        rec["epoch"] = epoch
        history.append(rec)
        if log_every and (epoch % log_every == 0 or epoch == config.epochs - 1):
            log.info("motion[%s] epoch %d total %.5f mse %.5f id %.5f (%.0fs)", config.cond_mode, epoch,
                     rec["total"], rec["mse"], rec["id"], time.time() - t0)
    model.eval()
    if out_dir is not None:
        save_motion(out_dir, model, history)
    return model, history


def save_motion(out_dir, model: MotionDiffusion, history) -> None:
    save_checkpoint(out_dir, {"motion": model},
                    {"kind": "motion", "config": asdict(model.cfg), "topology": model.cfg.topology,
                     "epoch": len(history), "history": history})


def load_motion(ckpt_dir) -> MotionDiffusion:
    meta = load_meta(ckpt_dir)
    if meta.get("kind") != "motion":
        raise ConfigurationError(f"{ckpt_dir} is not a motion checkpoint")
    model = MotionDiffusion(MotionModelConfig(**meta["config"]))
    load_state(ckpt_dir, {"motion": model})
    model.eval()
    return model
