"""Landmark images and lip / non-lip region masks."""
from __future__ import annotations

import numpy as np

from . import _kernels
from .core_types import LandmarkTopology, MaskSpec, ValidationError, VideoClip

MASK_MARGIN = 0.1
MASK_MIN_MARGIN_PX = 2.0
DISC_RADIUS = 1.0


def rasterize_landmarks(landmarks_frame, size: int = 64) -> np.ndarray:
    """Splat each landmark as an anti-aliased 2-pixel disc; returns [size, size, 3]."""
    pts = np.asarray(landmarks_frame, dtype=np.float64).reshape(-1, 2)
    if pts.size and (np.any(pts < -1.0) or np.any(pts > 1.0)):
        raise ValidationError("landmark coords must lie in [-1, 1]")
    img = _kernels.splat_discs((pts + 1.0) * 0.5 * size, size, size, DISC_RADIUS)
    return np.repeat(img[..., None], 3, axis=2).astype(np.float32)


def lip_mask(hull_points, size: int = 64, margin: float = MASK_MARGIN,
             min_margin_px: float = MASK_MIN_MARGIN_PX) -> MaskSpec:
    """Filled, dilated bounding box of the lip-hull points (any number of frames)."""
    pts = np.asarray(hull_points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] < 3:
        raise ValidationError("lip hull needs at least three points")
    px = (pts + 1.0) * 0.5 * size
    lo, hi = px.min(axis=0), px.max(axis=0)
    pad = np.maximum(margin * (hi - lo), min_margin_px)
    lo, hi = lo - pad, hi + pad
    cols = np.arange(size)
    in_x = (cols + 1 > lo[0]) & (cols < hi[0])
    in_y = (cols + 1 > lo[1]) & (cols < hi[1])
    mask = (in_y[:, None] & in_x[None, :]).astype(np.float32)
    return MaskSpec(mask, margin, min_margin_px)


def frame_lip_mask(landmarks_frames, topology: LandmarkTopology, size: int = 64) -> MaskSpec:
    """Mask covering the lip hull of one frame [L, 2] or the union over frames [K, L, 2]."""
    lm = np.asarray(landmarks_frames)
    return lip_mask(lm[..., list(topology.lip_hull_idx), :], size)


def make_region_frames(frame, landmarks_frame, topology: LandmarkTopology, mask: MaskSpec | None = None):
    """Split ``frame`` into lip-only and non-lip images; ``x_l + x_nl == frame``."""
    frame = np.asarray(frame, dtype=np.float32)
    if mask is None:
        mask = frame_lip_mask(landmarks_frame, topology, frame.shape[0])
    m = mask.mask[..., None]
    x_l = frame * m
    x_nl = frame * (1.0 - m)
    return x_l, x_nl, mask


def select_references(clip: VideoClip | np.ndarray | int, k: int, seed: int, exclude_idx: int | None) -> np.ndarray:
    """Pick ``k`` distinct frame indices (never ``exclude_idx``), deterministic per seed."""
    n = clip if isinstance(clip, (int, np.integer)) else (
        clip.n_frames if isinstance(clip, VideoClip) else len(clip))
    if k < 1 or n < k + 1:
        raise ValidationError(f"clip of {n} frames too short for {k} references")
    pool = np.array([i for i in range(n) if i != exclude_idx])
    rng = np.random.default_rng([int(seed), 0x5EF])
    return np.sort(rng.choice(pool, size=k, replace=False))


def masked_references(frames: np.ndarray, landmarks: np.ndarray, idx, topology: LandmarkTopology,
                      mode: str = "multi_masked") -> np.ndarray:
    """Reference images [k, S, S, 3]: lip-masked, or the raw frame for ``single_full``."""
    size = frames.shape[1]
    refs = []
    for i in idx:
        if mode == "single_full":
            refs.append(frames[i])
        else:
            m = frame_lip_mask(landmarks[i], topology, size).mask
            refs.append(frames[i] * m[..., None])
    return np.stack(refs).astype(np.float32)
