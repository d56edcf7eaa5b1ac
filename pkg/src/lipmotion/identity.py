"""Landmark identity extractor: MLP embedding trained with an additive angular margin loss."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core_types import ConfigurationError, IdentityEmbedding, ValidationError, load_topology
from .nn_utils import load_meta, load_state, save_checkpoint, seed_everything

log = logging.getLogger(__name__)

COS_EPS = 1e-7


@dataclass(frozen=True)
class IdentityExtractorConfig:
    mlp_layers: int = 3
    hidden_dim: int = 128
    embed_dim: int = 64
    margin: float = 0.5
    scale: float = 30.0
    n_classes: int = 30
    n_points: int = 48
    topology: str = "desk-48"
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0 or self.scale <= 1:
            raise ValidationError("need margin > 0 and scale > 1")
        if self.mlp_layers < 2:
            raise ValidationError("need at least two MLP layers")


IDENTITY_PRESETS = {
    "desk": IdentityExtractorConfig(),
    "paper": IdentityExtractorConfig(mlp_layers=4, hidden_dim=768, embed_dim=256, n_points=669,
                                     topology="paper-669", epochs=100, lr=1e-6),
}


class IdentityExtractor(nn.Module):
    def __init__(self, cfg: IdentityExtractorConfig):
        super().__init__()
        self.cfg = cfg
        d_in = cfg.n_points * 2
        dims = [d_in] + [cfg.hidden_dim] * (cfg.mlp_layers - 1) + [cfg.embed_dim]
        layers = []
        for i in range(cfg.mlp_layers):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < cfg.mlp_layers - 1:
                layers += [nn.LayerNorm(dims[i + 1]), nn.GELU()]
        self.mlp = nn.Sequential(*layers)
        self.register_buffer("in_mean", torch.zeros(d_in))
        self.register_buffer("in_std", torch.ones(d_in))

    def set_input_stats(self, frames: np.ndarray) -> None:
        flat = torch.tensor(np.asarray(frames), dtype=torch.float32).reshape(len(frames), -1)
        self.in_mean.copy_(flat.mean(0))
        self.in_std.copy_(flat.std(0).clamp_min(1e-3))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """[..., L, 2] landmark frames -> [..., D] unit-norm embeddings."""
        lead = frames.shape[:-2]
        x = (frames.reshape(*lead, -1) - self.in_mean) / self.in_std
        return F.normalize(self.mlp(x), dim=-1, eps=1e-12)


class ArcMarginHead(nn.Module):
    def __init__(self, n_classes: int, embed_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_classes, embed_dim) * 0.1)

    def normalized(self) -> torch.Tensor:
        return F.normalize(self.weight, dim=-1)


def arcface_loss(embeddings: torch.Tensor, labels: torch.Tensor, class_weights: torch.Tensor,
                 margin: float = 0.5, scale: float = 30.0) -> torch.Tensor:
    """Mean cross-entropy over logits s*cos(theta_y + m) (target) and s*cos(theta_j) (others).

    Inputs are expected unit-norm; cosines are clamped to [-1+1e-7, 1-1e-7]
    before arccos.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_classes = class_weights.shape[0]
    if labels.numel() and (int(labels.max()) >= n_classes or int(labels.min()) < 0):
        raise ValidationError(f"label outside [0, {n_classes})")
    cos = (embeddings @ class_weights.T).clamp(-1 + COS_EPS, 1 - COS_EPS)
    target = cos.gather(1, labels[:, None])
    target_logit = torch.cos(torch.acos(target) + margin)
    logits = cos.scatter(1, labels[:, None], target_logit) * scale
    return F.cross_entropy(logits, labels)


def embed(landmarks_frame, model: IdentityExtractor) -> IdentityEmbedding:
    x = torch.tensor(np.asarray(landmarks_frame), dtype=torch.float32)
    if not torch.isfinite(x).all():
        raise ValidationError("landmark frame contains NaN or inf")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        v = model(x).numpy().astype(np.float64)
    model.train(was_training)
    return IdentityEmbedding(v / np.linalg.norm(v))


def embed_frames(frames, model: IdentityExtractor) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        return model(torch.tensor(np.asarray(frames), dtype=torch.float32)).numpy()


def verification_metrics(emb: np.ndarray, labels: np.ndarray) -> dict:
    """Same/different verification over all pairs: EER, its threshold, balanced accuracy there."""
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels)
    sims = emb @ emb.T
    iu = np.triu_indices(len(labels), k=1)
    s = sims[iu]
    same = (labels[:, None] == labels[None, :])[iu]
    pos, neg = np.sort(s[same]), np.sort(s[~same])
    if pos.size == 0 or neg.size == 0:
        raise ValidationError("need both same- and different-identity pairs")
    cands = np.unique(np.concatenate([pos, neg]))
    frr = np.searchsorted(pos, cands, side="left") / pos.size
    far = 1.0 - np.searchsorted(neg, cands, side="left") / neg.size
    k = int(np.argmin(np.abs(far - frr)))
    thr = float(cands[k])
    tpr = float(np.mean(s[same] >= thr))
    tnr = float(np.mean(s[~same] < thr))
    return {"eer": float(0.5 * (far[k] + frr[k])), "threshold": thr, "accuracy": 0.5 * (tpr + tnr),
            "mean_same": float(pos.mean()), "mean_diff": float(neg.mean())}


def _frames_and_labels(clips, stride: int = 1):
    xs, ys = [], []
    for c in clips:
        # short clips still contribute two frames so same-identity pairs exist
        coords = c.landmarks.coords[::max(1, min(stride, c.n_frames // 2))]
        xs.append(coords)
        ys.append(np.full(len(coords), c.id_label))
    return np.concatenate(xs), np.concatenate(ys)


def evaluate_verification(model: IdentityExtractor, clips, stride: int = 10) -> dict:
    x, y = _frames_and_labels(clips, stride)
    return verification_metrics(embed_frames(x, model), y)


def train_identity(dataset, config: IdentityExtractorConfig | None = None, out_dir=None):
    """Train on the dataset's train split; returns (model, head, history)."""
    config = config or IdentityExtractorConfig()
    labels = sorted({c.id_label for c in dataset.clips})
    if len(labels) < 2:
        raise ValidationError("identity training needs at least two identities")
    config = replace(config, n_classes=max(labels) + 1)
    gen = seed_everything(config.seed)
    train = dataset.split("train")
    holdout = dataset.split("holdout")
    x, y = _frames_and_labels(train)
    model = IdentityExtractor(config)
    model.set_input_stats(x)
    head = ArcMarginHead(config.n_classes, config.embed_dim)
    opt = torch.optim.Adam(list(model.parameters()) + list(head.parameters()), lr=config.lr)
    xt = torch.as_tensor(x)
    yt = torch.as_tensor(y, dtype=torch.long)
    history = []
    for epoch in range(config.epochs):
        model.train()
        perm = torch.randperm(len(xt), generator=gen)
        total, n = 0.0, 0
        for i in range(0, len(perm), config.batch_size):
            idx = perm[i: i + config.batch_size]
            loss = arcface_loss(model(xt[idx]), yt[idx], head.normalized(), config.margin, config.scale)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            n += len(idx)
        rec = {"epoch": epoch, "loss": total / n}
        if holdout:
            rec.update({f"val_{k}": v for k, v in evaluate_verification(model, holdout).items()})
        history.append(rec)
        log.info("identity epoch %d loss %.4f val_acc %s", epoch, rec["loss"], rec.get("val_accuracy"))
    model.eval()
    if out_dir is not None:
        save_identity(out_dir, model, head, history)
    return model, head, history


def save_identity(out_dir, model: IdentityExtractor, head: ArcMarginHead, history) -> None:
    save_checkpoint(out_dir, {"extractor": model, "head": head},
                    {"kind": "identity", "config": asdict(model.cfg), "topology": model.cfg.topology,
                     "epoch": len(history), "history": history})


def load_identity(ckpt_dir) -> IdentityExtractor:
    meta = load_meta(ckpt_dir)
    if meta.get("kind") != "identity":
        raise ConfigurationError(f"{ckpt_dir} is not an identity checkpoint")
    cfg = IdentityExtractorConfig(**meta["config"])
    load_topology(cfg.topology)
    model = IdentityExtractor(cfg)
    head = ArcMarginHead(cfg.n_classes, cfg.embed_dim)
    load_state(ckpt_dir, {"extractor": model, "head": head})
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
