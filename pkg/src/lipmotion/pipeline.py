"""End-to-end lip sync: speech -> landmark motion -> regenerated lip region."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .appearance import AppearanceModel, clip_reference_indices, collate, load_appearance, _chw
from .core_types import ConfigurationError, LandmarkSequence, SpeechFeature, ValidationError, VideoClip
from .identity import embed, load_identity
from .motion import load_motion, sample, schedule_for
from .regions import lip_mask, masked_references, rasterize_landmarks

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LipSyncJob:
    source_clip: VideoClip
    source_landmarks: LandmarkSequence
    speech: SpeechFeature
    motion_ckpt: str | Path
    appearance_ckpt: str | Path
    id_ckpt: str | Path
    seed: int = 0

    def __post_init__(self):
        n = self.source_clip.n_frames
        if self.source_landmarks.n_frames != n:
            raise ValidationError(f"clip has {n} frames, landmarks {self.source_landmarks.n_frames}")
        if self.speech.n_frames != n:
            raise ValidationError(f"speech covers {self.speech.n_frames} frames, clip has {n}")


@dataclass
class LipSyncResult:
    clip: VideoClip
    landmarks: LandmarkSequence
    masks: np.ndarray  # [N, S, S] union of source and generated lip masks
    reference_idx: np.ndarray


def _mtime(path) -> float:
    return (Path(path) / "meta.json").stat().st_mtime if (Path(path) / "meta.json").exists() else 0.0


@lru_cache(maxsize=8)
def _load_cached(kind: str, path: str, mtime: float):
    return {"identity": load_identity, "motion": load_motion, "appearance": load_appearance}[kind](path)


def load_models(job: LipSyncJob):
    out = []
    for kind, p in (("identity", job.id_ckpt), ("motion", job.motion_ckpt), ("appearance", job.appearance_ckpt)):
        out.append(_load_cached(kind, str(Path(p).resolve()), _mtime(p)))
    return tuple(out)


def check_topologies(source_topology: str, extractor, motion, appearance) -> None:
    names = {"source": source_topology, "identity": extractor.cfg.topology, "motion": motion.cfg.topology,
             "appearance": appearance.cfg.topology}
    for k, v in names.items():
        if v != source_topology:
            raise ConfigurationError(f"topology mismatch: {k} checkpoint uses {v}, source uses {source_topology}")


@torch.no_grad()
def render_appearance(model: AppearanceModel, frames, source_lm, target_lm, topology, ref_idx,
                      batch_size: int = 32):
    """Regenerate every frame with ``target_lm`` motion; returns (frames [N,S,S,3], masks [N,S,S])."""
    size = frames.shape[1]
    if size != model.cfg.image_size:
        raise ConfigurationError(f"appearance model expects {model.cfg.image_size}px frames, got {size}px")
    hull = list(topology.lip_hull_idx)
    refs = _chw(masked_references(frames, source_lm, ref_idx, topology, model.cfg.reference_mode))
    outs, masks = [], []
    for s in range(0, len(frames), batch_size):
        items = []
        for i in range(s, min(s + batch_size, len(frames))):
            m = lip_mask(np.stack([source_lm[i, hull], target_lm[i, hull]]), size).mask
            items.append({"refs": refs, "x_nl": _chw(frames[i] * (1.0 - m[..., None])),
                          "x_m": _chw(rasterize_landmarks(target_lm[i], size)), "mask": torch.tensor(m)})
        b = collate(items)
        recon, _, _ = model(b["refs"], b["x_nl"], b["x_m"], sample=False)
        outs.append(recon.permute(0, 2, 3, 1).numpy())
        masks.append(b["mask"].numpy())
    return np.concatenate(outs), np.concatenate(masks)


def lipsync_detailed(job: LipSyncJob, models=None) -> LipSyncResult:
    extractor, motion, appearance = models if models is not None else load_models(job)
    topo = job.source_landmarks.topology
    check_topologies(topo.name, extractor, motion, appearance)
    src = np.asarray(job.source_landmarks.coords)
    z_id = embed(src[0], extractor)
    generated = sample(job.speech, job.source_landmarks, z_id, schedule_for(motion.cfg), motion, job.seed)
    ref_idx = clip_reference_indices(job.source_clip.n_frames, appearance.cfg, job.seed)
    frames, masks = render_appearance(appearance, job.source_clip.frames, src, generated.coords, topo, ref_idx)
    return LipSyncResult(VideoClip(np.clip(frames, 0.0, 1.0), job.source_clip.fps), generated, masks, ref_idx)


def lipsync(job: LipSyncJob, models=None) -> VideoClip:
    """Re-render ``job.source_clip`` so its lips follow ``job.speech``."""
    return lipsync_detailed(job, models).clip


def lipsync_batch(jobs, parallelism: int = 1):
    """Run independent jobs; one failure does not stop the rest.

    Returns (outputs, report) where failed jobs have output None.
    """
    jobs = list(jobs)

    def run(i_job):
        i, job = i_job
        try:
            return i, lipsync(job), None
        except Exception as exc:  # isolate per-job failures
            log.warning("job %d failed: %s", i, exc)
            return i, None, f"{type(exc).__name__}: {exc}"

    if parallelism > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(run, enumerate(jobs)))
    else:
        results = [run(x) for x in enumerate(jobs)]
    outputs = [r[1] for r in results]
    report = {
        "n_jobs": len(jobs),
        "n_ok": sum(r[2] is None for r in results),
        "n_failed": sum(r[2] is not None for r in results),
        "jobs": [{"index": i, "status": "ok" if err is None else "failed", "error": err} for i, _, err in results],
    }
    return outputs, report
