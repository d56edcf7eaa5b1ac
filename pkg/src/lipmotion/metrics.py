"""Evaluation metrics, the image identity probe, eval reports and the ablation harness."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from numpy.lib.stride_tricks import sliding_window_view
from torch import nn

from .core_types import ConfigurationError, LandmarkTopology, ValidationError
from .nn_utils import load_meta, load_state, save_checkpoint, seed_everything

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
REPORT_HEADER = ("sync_corr = Pearson r between lip aperture and speech energy "
                 "(stands in for SyncNet scores, which need pretrained weights); "
                 "id_sim uses a probe trained on the synthetic corpus")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR for [0, 1] images, capped at 99 dB. Clips [N, H, W, C] average per-frame values."""
    a, b = _pair(a, b)
    if a.ndim == 4:
        return float(np.mean([psnr(x, y) for x, y in zip(a, b)]))
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def nonlip_l1(a, b, masks) -> float:
    """Mean absolute error over pixels outside the lip masks [N, H, W] (or [H, W])."""
    a, b = _pair(a, b)
    keep = 1.0 - np.asarray(masks, dtype=np.float64)
    if keep.shape != a.shape[:-1]:
        raise ValidationError(f"mask shape {keep.shape} does not match images {a.shape}")
    n = keep.sum() * a.shape[-1]
    if n == 0:
        raise ValidationError("masks cover every pixel")
    return float((np.abs(a - b) * keep[..., None]).sum() / n)


def gaussian_window(size: int, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5) -> float:
    """Gaussian-window SSIM over valid positions, averaged over channels (and frames for clips)."""
    a, b = _pair(a, b)
    if a.ndim == 4:
        return float(np.mean([ssim(x, y, window, sigma) for x, y in zip(a, b)]))
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ValidationError(f"image {a.shape[:2]} smaller than the {window}x{window} window")
    w = gaussian_window(window, sigma)

    def filt(x):
        return np.einsum("hwcij,ij->hwc", sliding_window_view(x, (window, window), axis=(0, 1)), w)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


# --------------------------------------------------------------------------
# lip-sync proxy


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"frame count mismatch {x.shape} vs {y.shape}")
    xc, yc = x - x.mean(), y - y.mean()
    den = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if den < 1e-12:
        warnings.warn("zero-variance series; correlation undefined", RuntimeWarning, stacklevel=2)
        return float("nan")
    return float(np.clip(xc @ yc / den, -1.0, 1.0))


def landmark_aperture(coords, topology: LandmarkTopology) -> np.ndarray:
    """Per-frame vertical extent of the lip hull."""
    y = np.asarray(coords)[..., list(topology.lip_hull_idx), 1]
    return y.max(axis=-1) - y.min(axis=-1)


def image_lip_extent(frames, region) -> np.ndarray:
    """Per-frame vertical extent (pixels) of non-skin colour inside ``region``.

    Skin colour is the median over a 2-pixel ring around the region; the
    largest column of soft non-skin scores is taken per frame.
    """
    frames = np.asarray(frames, dtype=np.float64)
    region = np.asarray(region) > 0
    ring = _dilate(region, 2) & ~region
    skin = np.median(frames[:, ring], axis=1)
    dist = np.linalg.norm(frames - skin[:, None, None, :], axis=-1)
    scale = max(np.percentile(dist[:, region], 95), 1e-6)
    score = np.clip(dist / scale, 0.0, 1.0) * region
    return score.sum(axis=1).max(axis=1)


def _dilate(mask, r: int):
    out = mask.copy()
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            out |= np.roll(np.roll(mask, dy, 0), dx, 1)
    return out


def sync_corr(generated, speech, topology: LandmarkTopology | None = None, region=None) -> float:
    """Pearson r between lip aperture and speech energy.

    ``generated`` is a landmark array [N, L, 2] (needs ``topology``) or a clip
    [N, S, S, 3] (needs a lip ``region`` mask). ``speech`` is an energy track or
    an object with an ``energy`` attribute.
    """
    energy = np.asarray(getattr(speech, "energy", speech), dtype=np.float64)
    g = np.asarray(getattr(generated, "coords", getattr(generated, "frames", generated)))
    if g.ndim == 3:
        if topology is None:
            topology = getattr(generated, "topology", None)
        if topology is None:
            raise ValidationError("landmark sync_corr needs a topology")
        ap = landmark_aperture(g, topology)
    elif g.ndim == 4:
        if region is None:
            raise ValidationError("clip sync_corr needs a lip region mask")
        ap = image_lip_extent(g, region)
    else:
        raise ValidationError(f"expected landmarks [N, L, 2] or frames [N, S, S, 3], got {g.shape}")
    if len(ap) != len(energy):
        raise ValidationError(f"{len(ap)} frames vs {len(energy)} speech frames")
    return pearson(ap, energy)


# --------------------------------------------------------------------------
# identity similarity


def landmark_id_sim(generated, reference_frame, extractor) -> float:
    """Mean cosine between extractor embeddings of generated frames and one reference frame."""
    extractor.eval()
    with torch.no_grad():
        e = extractor(torch.tensor(np.asarray(generated), dtype=torch.float32))
        r = extractor(torch.tensor(np.asarray(reference_frame), dtype=torch.float32))
    return float((e @ r).mean())


class IdentityProbe(nn.Module):
    """Three conv blocks + linear classifier; penultimate features serve as identity embeddings."""

    def __init__(self, n_classes: int, width: int = 16, feat_dim: int = 64):
        super().__init__()
        layers, c = [], 3
        for i in range(3):
            layers += [nn.Conv2d(c, width * 2 ** i, 3, padding=1), nn.GroupNorm(4, width * 2 ** i), nn.SiLU(),
                       nn.MaxPool2d(2)]
            c = width * 2 ** i
        self.conv = nn.Sequential(*layers)
        self.feat = nn.Linear(c, feat_dim)
        self.head = nn.Linear(feat_dim, n_classes)
        self.n_classes = n_classes
        self.width = width
        self.feat_dim = feat_dim
        self.register_buffer("trained", torch.zeros(()))

    def features(self, x):
        h = self.conv(x).mean(dim=(2, 3))
        return self.feat(h)

    def forward(self, x):
        return self.head(F.silu(self.features(x)))


def _nchw(frames) -> torch.Tensor:
    return torch.tensor(np.moveaxis(np.asarray(frames, dtype=np.float32), -1, 1))


def probe_features(frames, probe: IdentityProbe, batch: int = 128) -> np.ndarray:
    if float(probe.trained) != 1.0:
        raise ConfigurationError("identity probe is untrained")
    probe.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(frames), batch):
            out.append(F.normalize(probe.features(_nchw(frames[s: s + batch])), dim=-1).numpy())
    return np.concatenate(out)


def id_sim(generated, reference, probe: IdentityProbe) -> float:
    """Mean per-frame cosine of probe features between two aligned clips."""
    g = np.asarray(getattr(generated, "frames", generated))
    r = np.asarray(getattr(reference, "frames", reference))
    if g.shape != r.shape:
        raise ValidationError(f"clip shapes differ: {g.shape} vs {r.shape}")
    fg, fr = probe_features(g, probe), probe_features(r, probe)
    return float(np.clip((fg * fr).sum(-1), -1.0, 1.0).mean())


def train_probe(dataset, epochs: int = 4, frames_per_clip: int = 50, seed: int = 0, out_dir=None):
    """Fit the image identity probe on train-split frames; returns (probe, holdout accuracy)."""
    gen = seed_everything(seed)
    rng = np.random.default_rng([seed, 0x9B0])
    labels = sorted({c.id_label for c in dataset.clips})
    probe = IdentityProbe(max(labels) + 1)

    def gather(clips):
        xs, ys = [], []
        for c in clips:
            idx = rng.choice(c.n_frames, size=min(frames_per_clip, c.n_frames), replace=False)
            xs.append(c.frames[idx])
            ys.append(np.full(len(idx), c.id_label))
        return np.concatenate(xs), np.concatenate(ys)

    x, y = gather(dataset.split("train"))
    xt, yt = _nchw(x), torch.as_tensor(y, dtype=torch.long)
    opt = torch.optim.Adam(probe.parameters(), lr=3e-3)
    for _ in range(epochs):
        probe.train()
        perm = torch.randperm(len(xt), generator=gen)
        for s in range(0, len(perm), 64):
            idx = perm[s: s + 64]
            loss = F.cross_entropy(probe(xt[idx]), yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    probe.eval()
    probe.trained.fill_(1.0)
    acc = float("nan")
    hold = dataset.split("holdout")
    if hold:
        hx, hy = gather(hold)
        with torch.no_grad():
            acc = float((probe(_nchw(hx)).argmax(1).numpy() == hy).mean())
    if out_dir is not None:
        save_checkpoint(out_dir, {"probe": probe}, {"kind": "probe", "n_classes": probe.n_classes,
                                                    "width": probe.width, "feat_dim": probe.feat_dim,
                                                    "holdout_accuracy": acc})
    return probe, acc


def load_probe(ckpt_dir) -> IdentityProbe:
    meta = load_meta(ckpt_dir)
    if meta.get("kind") != "probe":
        raise ConfigurationError(f"{ckpt_dir} is not an identity-probe checkpoint")
    probe = IdentityProbe(meta["n_classes"], meta["width"], meta["feat_dim"])
    load_state(ckpt_dir, {"probe": probe})
    probe.eval()
    return probe


# --------------------------------------------------------------------------
# reports


def _nanmean(values) -> float:
    v = np.asarray([np.nan if x is None else x for x in values], dtype=np.float64)
    if v.size == 0 or np.all(np.isnan(v)):
        return float("nan")
    return float(np.nanmean(v))


@dataclass
class EvalReport:
    psnr: float
    ssim: float
    id_sim: float
    sync_corr: float
    n_clips: int
    per_clip: list = field(default_factory=list)
    header: str = REPORT_HEADER

    @classmethod
    def from_clips(cls, per_clip: list[dict]) -> "EvalReport":
        agg = {k: _nanmean([c.get(k) for c in per_clip]) for k in ("psnr", "ssim", "id_sim", "sync_corr")}
        return cls(n_clips=len(per_clip), per_clip=per_clip, **agg)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    def to_text(self) -> str:
        rows = [{"clip": c.get("clip", ""), **c} for c in self.per_clip]
        rows.append({"clip": "MEAN", "psnr": self.psnr, "ssim": self.ssim, "id_sim": self.id_sim,
                     "sync_corr": self.sync_corr})
        return f"# {self.header}\n" + format_table(rows, ["clip", "psnr", "ssim", "id_sim", "sync_corr"])


def format_table(rows: list[dict], columns: list[str]) -> str:
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return "nan" if math.isnan(v) else f"{v:.4f}"
        return str(v)

    cells = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(r[i]) for r in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in cells]
    return "\n".join(lines)


# --------------------------------------------------------------------------
# ablations

ABLATION_SUITES = {
    "cond_modes": ("cond_mode", ["id_cross_attention", "concat_key_landmark", "add_key_landmark",
                                 "key_landmark_cross_attention"]),
    "id_loss_weights": ("id_weight", [0.0, 1.0, 2.0]),
    "reference_modes": ("reference_mode", ["multi_masked", "single_masked", "single_full"]),
}


def evaluate_motion(model, dataset, extractor, seed: int = 0, split: str = "holdout") -> list[dict]:
    """Sample every clip of ``split`` from its own speech; per-clip sync_corr and landmark id_sim."""
    from .identity import embed
    from .motion import make_batch, sample_batch, schedule_for

    clips = dataset.split(split)
    ref = model.cfg.reference_frame_idx
    batch = make_batch([c.landmarks for c in clips], [c.speech.audio_feats for c in clips],
                       [embed(c.landmarks.coords[ref], extractor) for c in clips], ref)
    out = sample_batch(model, batch, schedule_for(model.cfg), seed)
    rows = []
    for c, lm in zip(clips, out):
        rows.append({"clip": c.name, "sync_corr": sync_corr(lm, c.speech, c.topology),
                     "id_sim": landmark_id_sim(lm, c.landmarks.coords[ref], extractor)})
    return rows


def run_ablation(suite: str, dataset, base_config=None, id_extractor=None, out_dir=None, seed: int = 0) -> dict:
    """Train one model per variant of ``suite`` and tabulate sync_corr, id_sim and psnr.

    A failing variant is recorded with its error and does not stop the others.
    """
    if suite not in ABLATION_SUITES:
        raise ValidationError(f"unknown suite {suite!r}; choose from {sorted(ABLATION_SUITES)}")
    key, values = ABLATION_SUITES[suite]
    rows = []
    for v in values:
        row = {"variant": f"{key}={v}", "sync_corr": None, "id_sim": None, "psnr": None, "error": None}
        try:
            sub = None if out_dir is None else Path(out_dir) / f"{key}_{v}"
            if suite == "reference_modes":
                from .appearance import AppearanceModelConfig, ClipCache, evaluate_reconstruction, train_appearance

                cfg = replace(base_config or AppearanceModelConfig(), reference_mode=v, seed=seed)
                model, _, _ = train_appearance(dataset, cfg, sub)
                caches = [ClipCache(c, cfg.image_size) for c in dataset.split("holdout")]
                row["psnr"] = evaluate_reconstruction(model, caches)["psnr"]
            else:
                from .motion import MotionModelConfig, train_motion

                if id_extractor is None:
                    raise ConfigurationError("motion ablations need an identity extractor")
                cfg = replace(base_config or MotionModelConfig(), **{key: v}, seed=seed)
                model, _ = train_motion(dataset, cfg, id_extractor, sub)
                per = evaluate_motion(model, dataset, id_extractor, seed)
                row["sync_corr"] = _nanmean([r["sync_corr"] for r in per])
                row["id_sim"] = _nanmean([r["id_sim"] for r in per])
        except Exception as exc:  # isolate variant failures
            log.exception("ablation variant %s failed", row["variant"])
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    report = {"suite": suite, "header": REPORT_HEADER, "rows": rows}
    text = f"# {REPORT_HEADER}\n" + format_table(rows, ["variant", "sync_corr", "id_sim", "psnr", "error"])
    report["text"] = text
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / f"{suite}.json").write_text(json.dumps({k: report[k] for k in ("suite", "header", "rows")},
                                                                indent=1))
        (Path(out_dir) / f"{suite}.txt").write_text(text + "\n")
    return report
