"""Stage 2: motion-conditioned appearance autoencoder with a patch discriminator.

Three encoders of one architecture (lip references, non-lip frame, landmark
raster) produce latent grids. The lip and non-lip grids are fused into a
Gaussian appearance latent; the decoder sees it concatenated with the motion
grid and renders the full frame.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .core_types import ConfigurationError, ValidationError, load_topology
from .nn_utils import load_meta, load_state, save_checkpoint, seed_everything
from .regions import lip_mask, masked_references, rasterize_landmarks, select_references

log = logging.getLogger(__name__)

REFERENCE_MODES = ("multi_masked", "single_masked", "single_full")
PROB_EPS = 1e-7


@dataclass(frozen=True)
class AppearanceModelConfig:
    hidden_dim: int = 64
    resblocks_encoder: int = 4
    resblocks_decoder: int = 4
    resblocks_fusion: int = 2
    conv_kernel: int = 3
    downsamples: int = 2
    kl_weight: float = 1e-6
    disc_weight: float = 0.5
    adaptive_disc_weight: bool = True
    k_ref: int = 3
    reference_mode: str = "multi_masked"
    image_size: int = 64
    disc_hidden: int = 32
    disc_warmup: int = 1920  # last 4 of 20 desk epochs
    topology: str = "desk-48"
    epochs: int = 20
    frames_per_clip: int = 32
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.reference_mode not in REFERENCE_MODES:
            raise ValidationError(f"reference_mode must be one of {REFERENCE_MODES}")
        if self.reference_mode != "multi_masked" and self.k_ref != 1:
            object.__setattr__(self, "k_ref", 1)
        if self.image_size % (2 ** self.downsamples):
            raise ValidationError("image_size must be divisible by 2**downsamples")
        if self.conv_kernel % 2 == 0:
            raise ValidationError("conv_kernel must be odd")

    @property
    def latent_size(self) -> int:
        return self.image_size // 2 ** self.downsamples


APPEARANCE_PRESETS = {
    "desk": AppearanceModelConfig(),
    "paper": AppearanceModelConfig(hidden_dim=256, resblocks_encoder=8, resblocks_decoder=8, resblocks_fusion=4,
                                   image_size=256, downsamples=4, topology="paper-669", epochs=10, lr=1e-6,
                                   disc_warmup=500),
}


def _groups(c: int) -> int:
    for g in (32, 16, 8, 4, 2):
        if c % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, c: int, k: int = 3):
        super().__init__()
        self.net = nn.Sequential(
            nn.GroupNorm(_groups(c), c), nn.SiLU(), nn.Conv2d(c, c, k, padding=k // 2),
            nn.GroupNorm(_groups(c), c), nn.SiLU(), nn.Conv2d(c, c, k, padding=k // 2),
        )

    def forward(self, x):
        return x + self.net(x)


class Encoder(nn.Module):
    """[B, 3, S, S] -> [B, hidden, S / 2^d, S / 2^d]."""

    def __init__(self, cfg: AppearanceModelConfig):
        super().__init__()
        k, h, d = cfg.conv_kernel, cfg.hidden_dim, cfg.downsamples
        chans = [max(h // 2 ** (d - i), 8) for i in range(d + 1)]
        layers = [nn.Conv2d(3, chans[0], k, padding=k // 2)]
        for i in range(d):
            layers += [nn.SiLU(), nn.Conv2d(chans[i], chans[i + 1], k, stride=2, padding=k // 2)]
        self.down = nn.Sequential(*layers)
        self.blocks = nn.Sequential(*[ResBlock(h, k) for _ in range(cfg.resblocks_encoder)])
        self.quant = nn.Conv2d(h, h, 1)
        self.size = cfg.image_size

    def forward(self, x):
        if x.shape[-1] != self.size or x.shape[-2] != self.size:
            raise ValidationError(f"expected {self.size}x{self.size} input, got {tuple(x.shape[-2:])}")
        return self.quant(self.blocks(self.down(x)))


class FusionNet(nn.Module):
    """(lip grid [k*h], non-lip grid [h]) -> Gaussian moments of the appearance latent."""

    def __init__(self, cfg: AppearanceModelConfig):
        super().__init__()
        h, k = cfg.hidden_dim, cfg.conv_kernel
        self.inp = nn.Conv2d(h * (cfg.k_ref + 1), h, k, padding=k // 2)
        self.blocks = nn.Sequential(*[ResBlock(h, k) for _ in range(cfg.resblocks_fusion)])
        self.quant = nn.Conv2d(h, 2 * h, 1)

    def forward(self, z_lip, z_nonlip):
        if z_lip.shape[-2:] != z_nonlip.shape[-2:]:
            raise ValidationError("lip and non-lip grids are not spatially aligned")
        mean, logvar = self.quant(self.blocks(self.inp(torch.cat([z_lip, z_nonlip], 1)))).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)


class Decoder(nn.Module):
    def __init__(self, cfg: AppearanceModelConfig):
        super().__init__()
        k, h, d = cfg.conv_kernel, cfg.hidden_dim, cfg.downsamples
        self.post_quant = nn.Conv2d(2 * h, h, 1)
        self.blocks = nn.Sequential(*[ResBlock(h, k) for _ in range(cfg.resblocks_decoder)])
        chans = [max(h // 2 ** i, 8) for i in range(d + 1)]
        layers = []
        for i in range(d):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(chans[i], chans[i + 1], k, padding=k // 2), nn.SiLU()]
        layers.append(nn.Conv2d(chans[-1], 3, k, padding=k // 2))
        self.up = nn.Sequential(*layers)

    @property
    def last_layer(self) -> torch.Tensor:
        return self.up[-1].weight

    def forward(self, z_app, z_motion):
        if z_app.shape[-2:] != z_motion.shape[-2:]:
            raise ValidationError("appearance and motion grids are not spatially aligned")
        return torch.sigmoid(self.up(self.blocks(self.post_quant(torch.cat([z_app, z_motion], 1)))))


class PatchDiscriminator(nn.Module):
    """Four conv layers; outputs per-patch real probabilities in [1e-7, 1 - 1e-7]."""

    def __init__(self, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, hidden, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(hidden, 2 * hidden, 4, 2, 1), nn.GroupNorm(_groups(2 * hidden), 2 * hidden), nn.SiLU(),
            nn.Conv2d(2 * hidden, 4 * hidden, 3, 1, 1), nn.GroupNorm(_groups(4 * hidden), 4 * hidden),
            nn.SiLU(),
            nn.Conv2d(4 * hidden, 1, 3, 1, 1),
        )

    def forward(self, x):
        return torch.sigmoid(self.net(x)).clamp(PROB_EPS, 1 - PROB_EPS)


class AppearanceModel(nn.Module):
    def __init__(self, cfg: AppearanceModelConfig):
        super().__init__()
        self.cfg = cfg
        self.enc_lip = Encoder(cfg)
        self.enc_nonlip = Encoder(cfg)
        self.enc_motion = Encoder(cfg)
        self.fusion = FusionNet(cfg)
        self.decoder = Decoder(cfg)

    def encode_lip(self, refs):
        """[B, k, 3, S, S] -> [B, k*h, s, s]; one shared encoder, concatenated over references."""
        b, k = refs.shape[:2]
        if k != self.cfg.k_ref:
            raise ValidationError(f"expected {self.cfg.k_ref} references, got {k}")
        z = self.enc_lip(refs.reshape(b * k, *refs.shape[2:]))
        return z.reshape(b, k * z.shape[1], *z.shape[2:])

    def encode_nonlip(self, x_nl):
        return self.enc_nonlip(x_nl)

    def encode_motion(self, x_m):
        return self.enc_motion(x_m)

    def fuse(self, z_lip, z_nonlip):
        return self.fusion(z_lip, z_nonlip)

    def decode(self, z_app, z_motion):
        return self.decoder(z_app, z_motion)

    def forward(self, refs, x_nl, x_m, sample: bool | None = None, generator=None):
        """Returns (reconstruction, mean, logvar). Samples the latent in training mode."""
        mean, logvar = self.fuse(self.encode_lip(refs), self.encode_nonlip(x_nl))
        if sample is None:
            sample = self.training
        z = mean
        if sample:
            eps = torch.randn(mean.shape, generator=generator)
            z = mean + torch.exp(0.5 * logvar) * eps
        return self.decode(z, self.encode_motion(x_m)), mean, logvar


# --------------------------------------------------------------------------
# losses


def kl_term(mean, logvar):
    """KL(N(mean, exp(logvar)) || N(0, I)) summed over latent elements, averaged over the batch."""
    kl = 0.5 * (mean ** 2 + torch.exp(logvar) - 1.0 - logvar)
    return kl.reshape(kl.shape[0], -1).sum(1).mean()


def disc_loss(real, fake, disc):
    """Mean log D(real) + mean log(1 - D(fake)); the discriminator maximizes this."""
    return torch.log(disc(real)).mean() + torch.log(1.0 - disc(fake)).mean()


def generator_adv_loss(fake, disc):
    return -torch.log(disc(fake)).mean()


def adv_weight(cfg: AppearanceModelConfig, step: int) -> float:
    return 0.0 if step < cfg.disc_warmup else cfg.disc_weight


def adaptive_scale(rec_loss, adv_loss, last_layer) -> torch.Tensor:
    """||grad rec|| / ||grad adv|| at the decoder's last layer, clamped to [0, 1e4] and detached."""
    g_rec = torch.autograd.grad(rec_loss, last_layer, retain_graph=True)[0]
    g_adv = torch.autograd.grad(adv_loss, last_layer, retain_graph=True)[0]
    return (g_rec.norm() / (g_adv.norm() + 1e-4)).clamp(0.0, 1e4).detach()


def vae_loss(batch: dict, model: AppearanceModel, disc, step: int = 0, generator=None):
    """Returns (total, l1, kl, adv, recon); total = l1 + w_kl*kl + w_adv(step)*s*adv.

    ``s`` is 1, or the adaptive gradient-norm ratio when ``adaptive_disc_weight`` is set.
    """
    cfg = model.cfg
    recon, mean, logvar = model(batch["refs"], batch["x_nl"], batch["x_m"], generator=generator)
    l1 = (recon - batch["target"]).abs().mean()
    kl = kl_term(mean, logvar)
    w = adv_weight(cfg, step)
    if w > 0 and disc is not None:
        adv = generator_adv_loss(recon, disc)
        if cfg.adaptive_disc_weight and torch.is_grad_enabled():
            w = w * adaptive_scale(l1, adv, model.decoder.last_layer)
    else:
        adv = recon.new_zeros(())
    total = l1 + cfg.kl_weight * kl + w * adv
    return total, l1, kl, adv, recon


# --------------------------------------------------------------------------
# data


def _chw(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(a, -1, -3), dtype=np.float32))


class ClipCache:
    """Frames, landmarks and landmark rasters for one clip, loaded once."""

    def __init__(self, clip, size: int):
        self.name = clip.name
        self.frames = clip.frames
        if self.frames.shape[1] != size:
            raise ValidationError(f"clip {clip.name} is {self.frames.shape[1]}px, model expects {size}px")
        self.landmarks = np.asarray(clip.landmarks.coords)
        self.topology = clip.topology
        self.hulls = self.landmarks[:, list(self.topology.lip_hull_idx)]
        self.size = size
        self._rasters = {}

    def raster(self, i: int) -> np.ndarray:
        if i not in self._rasters:
            self._rasters[i] = rasterize_landmarks(self.landmarks[i], self.size)
        return self._rasters[i]


def make_sample(cache: ClipCache, i: int, ref_idx, mode: str, mask_hulls) -> dict:
    mask = lip_mask(mask_hulls, cache.size).mask[..., None]
    frame = cache.frames[i]
    refs = masked_references(cache.frames, cache.landmarks, ref_idx, cache.topology, mode)
    return {"refs": _chw(refs), "x_nl": _chw(frame * (1.0 - mask)), "x_m": _chw(cache.raster(i)),
            "target": _chw(frame), "mask": torch.from_numpy(mask[..., 0].copy())}


def collate(samples) -> dict:
    return {k: torch.stack([s[k] for s in samples]) for k in samples[0]}


def training_sample(cache: ClipCache, i: int, cfg: AppearanceModelConfig, rng: np.random.Generator) -> dict:
    n = len(cache.frames)
    ref_idx = select_references(n, cfg.k_ref, int(rng.integers(2**31)), exclude_idx=i)
    # the inference mask is the union of source and generated hulls; mimic it with a second frame's hull
    other = int(rng.integers(n))
    return make_sample(cache, i, ref_idx, cfg.reference_mode, cache.hulls[[i, other]])


def clip_reference_indices(n_frames: int, cfg: AppearanceModelConfig, seed: int) -> np.ndarray:
    """References fixed per clip for inference and evaluation."""
    return select_references(n_frames, cfg.k_ref, seed, exclude_idx=None)


# --------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def reconstruct_clip(model: AppearanceModel, cache: ClipCache, frame_idx=None, seed: int = 0,
                     batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Reconstruct frames from their own landmarks; returns (recon [n,S,S,3], masks [n,S,S])."""
    model.eval()
    idx = np.arange(len(cache.frames)) if frame_idx is None else np.asarray(frame_idx)
    ref_idx = clip_reference_indices(len(cache.frames), model.cfg, seed)
    outs, masks = [], []
    for s in range(0, len(idx), batch_size):
        batch = collate([make_sample(cache, int(i), ref_idx, model.cfg.reference_mode, cache.hulls[[int(i)]])
                         for i in idx[s: s + batch_size]])
        recon, _, _ = model(batch["refs"], batch["x_nl"], batch["x_m"], sample=False)
        outs.append(recon.permute(0, 2, 3, 1).numpy())
        masks.append(batch["mask"].numpy())
    return np.concatenate(outs), np.concatenate(masks)


def evaluate_reconstruction(model: AppearanceModel, caches, stride: int = 5) -> dict:
    from .metrics import nonlip_l1, psnr

    ps, nl = [], []
    for c in caches:
        idx = np.arange(0, len(c.frames), stride)
        recon, masks = reconstruct_clip(model, c, idx)
        target = c.frames[idx]
        ps.append(psnr(recon, target))
        nl.append(nonlip_l1(recon, target, masks))
    return {"psnr": float(np.mean(ps)), "nonlip_l1": float(np.mean(nl))}


def save_sample_grid(path, batch: dict, recon) -> None:
    """Rows: target, non-lip input, landmark raster, first reference, reconstruction."""
    rows = [batch["target"], batch["x_nl"], batch["x_m"], batch["refs"][:, 0], recon]
    n = min(8, rows[0].shape[0])
    grid = torch.cat([torch.cat(list(r[:n].detach()), dim=2) for r in rows], dim=1)
    img = (grid.clamp(0, 1).permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path)


# --------------------------------------------------------------------------
# training


def train_appearance(dataset, config: AppearanceModelConfig | None = None, out_dir=None, eval_every: int = 0):
    """Train on ``frames_per_clip`` random frames of every train clip per epoch.

    Returns (model, disc, history).
    """
    cfg = config or AppearanceModelConfig()
    if dataset.image_size != cfg.image_size:
        cfg = replace(cfg, image_size=dataset.image_size)
    gen = seed_everything(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0xA99])
    caches = [ClipCache(c, cfg.image_size) for c in dataset.split("train")]
    if caches and caches[0].topology.name != cfg.topology:
        raise ConfigurationError(f"dataset topology {caches[0].topology.name} != config topology {cfg.topology}")
    holdout = [ClipCache(c, cfg.image_size) for c in dataset.split("holdout")]
    model = AppearanceModel(cfg)
    disc = PatchDiscriminator(cfg.disc_hidden)
    opt_g = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.5, 0.9))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(0.5, 0.9))
    history, step, t0 = [], 0, time.time()
    for epoch in range(cfg.epochs):
        model.train()
        disc.train()
        order = [(ci, int(fi)) for ci, c in enumerate(caches)
                 for fi in rng.choice(len(c.frames), size=min(cfg.frames_per_clip, len(c.frames)), replace=False)]
        order = [order[j] for j in rng.permutation(len(order))]
        sums = np.zeros(5)
        for s in range(0, len(order), cfg.batch_size):
            batch = collate([training_sample(caches[ci], fi, cfg, rng) for ci, fi in order[s: s + cfg.batch_size]])
            rec = train_step(model, disc, opt_g, opt_d, batch, step, gen)
            sums += np.array([rec["total"], rec["l1"], rec["kl"], rec["adv"], rec["disc"]]) * len(batch["target"])
            step += 1
        entry = dict(zip(("total", "l1", "kl", "adv", "disc"), (sums / len(order)).tolist()))
        entry.update(epoch=epoch, step=step)
        if holdout and eval_every and ((epoch + 1) % eval_every == 0 or epoch == cfg.epochs - 1):
            entry.update({f"val_{k}": v for k, v in evaluate_reconstruction(model, holdout).items()})
        history.append(entry)
        log.info("appearance[%s] epoch %d l1 %.4f kl %.1f adv %.3f disc %.3f %s (%.0fs)", cfg.reference_mode,
                 epoch, entry["l1"], entry["kl"], entry["adv"], entry["disc"],
                 {k: round(v, 3) for k, v in entry.items() if k.startswith("val_")}, time.time() - t0)
        if out_dir is not None:
            model.eval()
            with torch.no_grad():
                recon, _, _ = model(batch["refs"], batch["x_nl"], batch["x_m"], sample=False)
            save_sample_grid(Path(out_dir) / "samples" / f"epoch_{epoch:03d}.png", batch, recon)
    model.eval()
    disc.eval()
    if out_dir is not None:
        save_appearance(out_dir, model, disc, history)
    return model, disc, history


def train_step(model, disc, opt_g, opt_d, batch, step: int, generator=None) -> dict:
    """One generator update followed (after warm-up) by one discriminator update."""
    cfg = model.cfg
    use_adv = adv_weight(cfg, step) > 0
    disc.requires_grad_(False)
    total, l1, kl, adv, recon = vae_loss(batch, model, disc, step, generator)
    opt_g.zero_grad()
    total.backward()
    opt_g.step()
    disc.requires_grad_(True)
    d_val = 0.0
    if use_adv:
        model.requires_grad_(False)
        d = disc_loss(batch["target"], recon.detach(), disc)
        opt_d.zero_grad()
        (-d).backward()
        opt_d.step()
        model.requires_grad_(True)
        d_val = float(d.detach())
    return {"total": float(total.detach()), "l1": float(l1.detach()), "kl": float(kl.detach()),
            "adv": float(adv.detach()), "disc": d_val}


def save_appearance(out_dir, model: AppearanceModel, disc: PatchDiscriminator, history) -> None:
    save_checkpoint(out_dir, {"appearance": model, "disc": disc},
                    {"kind": "appearance", "config": asdict(model.cfg), "topology": model.cfg.topology,
                     "epoch": len(history), "history": history})


def load_appearance(ckpt_dir) -> AppearanceModel:
    meta = load_meta(ckpt_dir)
    if meta.get("kind") != "appearance":
        raise ConfigurationError(f"{ckpt_dir} is not an appearance checkpoint")
    cfg = AppearanceModelConfig(**meta["config"])
    load_topology(cfg.topology)
    model = AppearanceModel(cfg)
    disc = PatchDiscriminator(cfg.disc_hidden)
    load_state(ckpt_dir, {"appearance": model, "disc": disc})
    model.eval()
    return model
