"""Procedural talking-face corpus.

Identities are random face geometries plus a colour palette; speech is a
band-limited scalar "lip drive" track. Landmarks are built so the lip-hull
vertical extent is exactly ``a(id) + b(id) * energy`` and the upper face only
follows a per-clip head bob, which makes the corpus an exact oracle for lip
sync and for motion/appearance disentanglement.
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels
from .core_types import (
    LandmarkSequence,
    LandmarkTopology,
    SpeechFeature,
    ValidationError,
    load_array,
    load_topology,
    save_array,
)

log = logging.getLogger(__name__)

K_ID = 10
SPEECH_DIM = 16
KNOT_SPACING = 5
PAUSE_PROB = 0.35
BOB_AMPLITUDE = 0.015
LIP_PROFILE = np.array([0.6, 0.2, 0.2, 0.6])  # |x| / half-width of the upper/lower arc points
PALETTE_KEYS = ("skin", "lip", "eye", "mouth")

# shape_vec slots
FACE_W, FACE_H, EYE_SPACING, EYE_SIZE, MOUTH_W, LIP_THICK, JAW_DROP, NOSE_LEN, BROW_H, JAW_W = range(K_ID)


@dataclass(frozen=True)
class IdentityParams:
    shape_vec: np.ndarray
    palette: np.ndarray  # [4, 3] rows: skin, lip, eye, mouth interior
    id_label: int

    @property
    def closed_aperture(self) -> float:
        """a(id): lip-hull vertical extent at zero drive."""
        return float(_lip_a(self) * _arc_peak())

    @property
    def aperture_gain(self) -> float:
        """b(id): extent added per unit of speech energy."""
        return float(_lip_b(self) * _arc_peak())

    def to_dict(self) -> dict:
        return {"id_label": self.id_label, "shape_vec": self.shape_vec.tolist(),
                "palette": self.palette.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "IdentityParams":
        return cls(np.asarray(d["shape_vec"]), np.asarray(d["palette"]), int(d["id_label"]))


@dataclass(frozen=True)
class SpeechTrack:
    energy: np.ndarray
    feats: SpeechFeature  # frame-aligned rows
    audio_feats: SpeechFeature  # two rows per frame

    @property
    def n_frames(self) -> int:
        return self.energy.shape[0]


def sample_identity(seed: int, id_label: int) -> IdentityParams:
    rng = np.random.default_rng([int(seed), int(id_label), 0x1D])
    shape_vec = rng.uniform(0.0, 1.0, K_ID)
    tone = rng.uniform()
    skin = np.clip((1 - tone) * np.array([0.96, 0.82, 0.7]) + tone * np.array([0.42, 0.28, 0.2])
                   + rng.normal(0.0, 0.04, 3), 0.0, 1.0)
    lip = rng.uniform([0.45, 0.05, 0.1], [0.85, 0.3, 0.4])
    eye = rng.uniform([0.0, 0.0, 0.0], [0.35, 0.4, 0.45])
    mouth = rng.uniform([0.1, 0.1, 0.1], [1.0, 1.0, 1.0])
    return IdentityParams(shape_vec, np.stack([skin, lip, eye, mouth]), int(id_label))


# --------------------------------------------------------------------------
# speech

_EMBED_RNG = np.random.default_rng(20240611)
_EMBED_W = _EMBED_RNG.normal(0.0, 1.5, (SPEECH_DIM, 3))
_EMBED_B = _EMBED_RNG.normal(0.0, 0.5, SPEECH_DIM)


def embed_energy(energy: np.ndarray) -> np.ndarray:
    """Fixed smooth embedding of (e[i-1], e[i], e[i+1]) per row, edges replicated."""
    e = np.asarray(energy, dtype=np.float64)
    prev = np.concatenate([e[:1], e[:-1]])
    nxt = np.concatenate([e[1:], e[-1:]])
    x = np.stack([prev, e, nxt], axis=1)
    return np.tanh(x @ _EMBED_W.T + _EMBED_B)


def _energy_track(n_frames: int, rng: np.random.Generator) -> np.ndarray:
    n_knots = (n_frames - 1) // KNOT_SPACING + 2
    knots = rng.uniform(0.3, 1.0, n_knots)
    knots[rng.uniform(size=n_knots) < PAUSE_PROB] = 0.0
    t = np.arange(n_frames)
    k = t // KNOT_SPACING
    s = (t - k * KNOT_SPACING) / KNOT_SPACING
    w = 0.5 * (1.0 - np.cos(np.pi * s))
    return knots[k] * (1.0 - w) + knots[k + 1] * w


def speech_from_energy(energy: np.ndarray) -> SpeechTrack:
    e = np.asarray(energy, dtype=np.float64)
    n = e.shape[0]
    pos = np.clip(np.arange(2 * n) / 2.0, 0, n - 1)
    audio_e = np.interp(pos, np.arange(n), e)
    return SpeechTrack(
        energy=e.astype(np.float32),
        feats=SpeechFeature(embed_energy(e), rows_per_frame=1),
        audio_feats=SpeechFeature(embed_energy(audio_e), rows_per_frame=2),
    )


def synth_speech(n_frames: int, seed: int) -> SpeechTrack:
    if n_frames < 1:
        raise ValidationError("n_frames must be >= 1")
    rng = np.random.default_rng([int(seed), 0x5EEC])
    return speech_from_energy(_energy_track(n_frames, rng))


# --------------------------------------------------------------------------
# geometry (desk-48 layout; see presets/desk-48.json)

HEAD_CENTER = np.array([0.0, 0.05])


def _face_wh(p: IdentityParams):
    s = p.shape_vec
    return 0.55 + 0.2 * s[FACE_W], 0.72 + 0.15 * s[FACE_H]


def _mouth_y(p: IdentityParams) -> float:
    return 0.36 + 0.05 * p.shape_vec[NOSE_LEN]


def _mouth_w(p: IdentityParams) -> float:
    return 0.17 + 0.1 * p.shape_vec[MOUTH_W]


def _lip_a(p: IdentityParams) -> float:
    return 0.05 + 0.05 * p.shape_vec[LIP_THICK]


def _lip_b(p: IdentityParams) -> float:
    return 0.10 + 0.14 * p.shape_vec[JAW_DROP]


def _arc_peak() -> float:
    return float(np.sqrt(1.0 - LIP_PROFILE.min() ** 2))


def _ellipse(cx, cy, rx, ry, angles):
    return np.stack([cx + rx * np.cos(angles), cy + ry * np.sin(angles)], axis=-1)


def lip_hull(p: IdentityParams, energy) -> np.ndarray:
    """Outer lip polygon [..., 10, 2]: left corner, upper arc, right corner, lower arc."""
    e = np.asarray(energy, dtype=np.float64)[..., None]
    w, ym, a, b = _mouth_w(p), _mouth_y(p), _lip_a(p), _lip_b(p)
    xs = np.array([-0.6, -0.2, 0.2, 0.6])
    prof = np.sqrt(1.0 - xs**2)
    up_x = np.broadcast_to(w * xs, e.shape[:-1] + (4,))
    up_y = np.broadcast_to(ym - 0.5 * a * prof, e.shape[:-1] + (4,))
    lo_x = np.broadcast_to(w * xs[::-1], e.shape[:-1] + (4,))
    lo_y = ym + (0.5 * a + b * e) * prof[::-1]
    corner_y = np.full(e.shape[:-1] + (1,), ym)
    x = np.concatenate([np.full_like(corner_y, -w), up_x, np.full_like(corner_y, w), lo_x], -1)
    y = np.concatenate([corner_y, up_y, corner_y, lo_y], -1)
    return np.stack([x, y], axis=-1)


def canonical_landmarks(p: IdentityParams, energy=0.0) -> np.ndarray:
    """Landmarks [..., 48, 2] for the given drive, without head bob."""
    e = np.asarray(energy, dtype=np.float64)
    s = p.shape_vec
    fw, fh = _face_wh(p)
    cx, cy = HEAD_CENTER
    lead = e.shape
    pts = np.zeros(lead + (48, 2))
    pts[..., 0:10, :] = lip_hull(p, e)

    jaw_ang = np.linspace(0.12 * np.pi, 0.88 * np.pi, 11)
    jaw = _ellipse(cx, cy, fw * (0.85 + 0.1 * s[JAW_W]), 0.8 * fh, jaw_ang)
    drop = 0.6 * _lip_b(p) * np.sin(jaw_ang)
    pts[..., 10:21, 0] = jaw[:, 0]
    pts[..., 10:21, 1] = jaw[:, 1] + e[..., None] * drop
    ym = _mouth_y(p)
    pts[..., 21:24, :] = np.array([[-0.45 * fw, ym - 0.12], [0.45 * fw, ym - 0.12], [0.0, ym + 0.27]])

    ex = 0.22 + 0.12 * s[EYE_SPACING]
    ew, eh = 0.08 + 0.05 * s[EYE_SIZE], 0.04 + 0.02 * s[EYE_SIZE]
    ey = -0.2
    for base, sx in ((24, -1.0), (28, 1.0)):
        c = sx * ex
        pts[..., base: base + 4, :] = np.array([[c - ew, ey], [c, ey - eh], [c + ew, ey], [c, ey + eh]])
    by = ey - eh - 0.08 - 0.06 * s[BROW_H]
    for base, sx in ((32, -1.0), (35, 1.0)):
        c = sx * ex
        pts[..., base: base + 3, :] = np.array(
            [[c - sx * 0.9 * ew, by + 0.01], [c, by - 0.03], [c + sx * 1.2 * ew, by + 0.02]]
        )
    tip = -0.15 + 0.2 + 0.1 * s[NOSE_LEN]
    pts[..., 38:42, :] = np.array([[0.0, -0.15], [0.0, tip], [-0.07, tip - 0.02], [0.07, tip - 0.02]])
    up_ang = np.linspace(1.15 * np.pi, 1.85 * np.pi, 6)
    pts[..., 42:48, :] = _ellipse(cx, cy, fw, fh, up_ang)
    return pts


def head_bob(id_label: int, clip_seed: int, n_frames: int) -> np.ndarray:
    """Deterministic per-clip head translation [N, 2], amplitude below 0.02."""
    rng = np.random.default_rng([int(id_label), int(clip_seed), 0xB0B])
    freq = rng.uniform(0.02, 0.06, 2)
    phase = rng.uniform(0, 2 * np.pi, 2)
    t = np.arange(n_frames)[:, None]
    return BOB_AMPLITUDE * np.sin(2 * np.pi * freq * t + phase)


def landmarks_from(
    ident: IdentityParams,
    speech: SpeechTrack,
    topology: LandmarkTopology | None = None,
    clip_seed: int = 0,
) -> LandmarkSequence:
    topology = topology or load_topology("desk-48")
    if topology.total_points != 48:
        raise ValidationError("the procedural face generator emits the desk-48 topology only")
    pts = canonical_landmarks(ident, speech.energy.astype(np.float64))
    pts = pts + head_bob(ident.id_label, clip_seed, speech.n_frames)[:, None, :]
    return LandmarkSequence(pts.astype(np.float32), topology)


def lip_aperture(coords: np.ndarray, topology: LandmarkTopology) -> np.ndarray:
    """Vertical extent of the lip hull per frame."""
    y = np.asarray(coords)[..., list(topology.lip_hull_idx), 1]
    return y.max(axis=-1) - y.min(axis=-1)


# --------------------------------------------------------------------------
# rendering

BACKGROUND = np.array([0.18, 0.22, 0.3])


def _to_px(coords, size):
    return (np.asarray(coords, dtype=np.float64) + 1.0) * 0.5 * size


def _paint(canvas, poly_px, color):
    h, w = canvas.shape[:2]
    cov = _kernels.polygon_coverage(poly_px, h, w)[..., None]
    canvas *= 1.0 - cov
    canvas += cov * color


def mouth_interior(lm: np.ndarray) -> np.ndarray:
    """Polygon of the open-mouth interior from a 48-point frame (degenerate when closed)."""
    hull = lm[0:10]
    upper_inner_y = 0.5 * (hull[0, 1] + hull[5, 1])
    # lower-lip thickness equals upper-lip thickness by construction
    upper = hull[1:5]
    lower = hull[6:10]
    thick = upper_inner_y - upper[:, 1]
    inner_low = lower.copy()
    inner_low[:, 1] = np.maximum(lower[:, 1] - thick[::-1], upper_inner_y)
    inner_up = upper.copy()
    inner_up[:, 1] = upper_inner_y
    left = np.array([0.85 * hull[0, 0] + 0.15 * hull[5, 0], upper_inner_y])
    right = np.array([0.15 * hull[0, 0] + 0.85 * hull[5, 0], upper_inner_y])
    return np.concatenate([left[None], inner_up, right[None], inner_low])


def render_frame(landmarks_frame: np.ndarray, ident: IdentityParams, size: int = 64,
                 _canon_contour=None) -> np.ndarray:
    """Rasterize one frame [size, size, 3] in [0, 1].

    Only the lip hull among the lower-face points is drawn, so edits to the
    lower face stay inside the lip mask.
    """
    lm = np.asarray(landmarks_frame, dtype=np.float64)
    if lm.shape != (48, 2):
        raise ValidationError("render_frame expects a desk-48 frame")
    skin, lip, eye, mouth = ident.palette
    yy = (np.arange(size) + 0.5) / size
    canvas = np.repeat((BACKGROUND[None, :] * (0.8 + 0.4 * yy[:, None]))[:, None, :], size, axis=1)

    if _canon_contour is None:
        _canon_contour = canonical_landmarks(ident, 0.0)[42:48].mean(axis=0)
    offset = lm[42:48].mean(axis=0) - _canon_contour
    fw, fh = _face_wh(ident)
    oval = _ellipse(HEAD_CENTER[0] + offset[0], HEAD_CENTER[1] + offset[1], fw, fh,
                    np.linspace(0, 2 * np.pi, 40, endpoint=False))
    _paint(canvas, _to_px(oval, size), skin)
    for sl in (slice(32, 35), slice(35, 38)):
        _paint(canvas, _to_px(lm[sl], size), skin * 0.55)
    for sl in (slice(24, 28), slice(28, 32)):
        _paint(canvas, _to_px(lm[sl], size), eye)
    _paint(canvas, _to_px(lm[[39, 40, 38, 41]], size), skin * 0.8)
    _paint(canvas, _to_px(lm[0:10], size), lip)
    _paint(canvas, _to_px(mouth_interior(lm), size), mouth)
    return np.clip(canvas, 0.0, 1.0).astype(np.float32)


def render_clip(seq: LandmarkSequence, ident: IdentityParams, size: int = 64) -> np.ndarray:
    contour = canonical_landmarks(ident, 0.0)[42:48].mean(axis=0)
    return np.stack([render_frame(f, ident, size, contour) for f in seq.coords])


# --------------------------------------------------------------------------
# dataset on disk


@dataclass
class ClipRecord:
    root: Path
    name: str
    id_label: int
    clip_index: int
    split: str
    identity: IdentityParams
    topology: LandmarkTopology
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def path(self) -> Path:
        return self.root / "clips" / self.name

    @property
    def landmarks(self) -> LandmarkSequence:
        if "lm" not in self._cache:
            self._cache["lm"] = LandmarkSequence(load_array(self.path / "landmarks.bin", "landmarks"), self.topology)
        return self._cache["lm"]

    @property
    def speech(self) -> SpeechTrack:
        if "sp" not in self._cache:
            energy = load_array(self.path / "energy.bin", "energy")
            audio = load_array(self.path / "speech.bin", "speech_audio")
            track = speech_from_energy(energy)
            if not np.allclose(track.audio_feats.feats, audio, atol=1e-6):
                raise ValidationError(f"{self.path}: speech features do not match energy track")
            self._cache["sp"] = SpeechTrack(energy, track.feats, SpeechFeature(audio, 2))
        return self._cache["sp"]

    @property
    def frames(self) -> np.ndarray:
        if "fr" not in self._cache:
            files = sorted((self.path / "frames").glob("*.png"))
            self._cache["fr"] = np.stack([np.asarray(Image.open(f), dtype=np.float32) / 255.0 for f in files])
        return self._cache["fr"]

    @property
    def n_frames(self) -> int:
        return self.landmarks.n_frames


@dataclass
class Dataset:
    root: Path
    manifest: dict
    clips: list[ClipRecord]

    def split(self, name: str) -> list[ClipRecord]:
        return [c for c in self.clips if c.split == name]

    @property
    def n_identities(self) -> int:
        return len({c.id_label for c in self.clips})

    @property
    def image_size(self) -> int:
        return int(self.manifest["image_size"])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_clip(out: Path, seed: int, id_label: int, clip_index: int, n_frames: int, size: int,
                split: str) -> dict:
    name = f"id{id_label:03d}_c{clip_index:02d}"
    cdir = out / "clips" / name
    (cdir / "frames").mkdir(parents=True, exist_ok=True)
    ident = sample_identity(seed, id_label)
    clip_seed = int(seed) * 100003 + id_label * 101 + clip_index
    speech = synth_speech(n_frames, clip_seed)
    lm = landmarks_from(ident, speech, clip_seed=clip_seed)
    save_array(cdir / "landmarks.bin", lm.coords, "landmarks")
    save_array(cdir / "energy.bin", speech.energy, "energy")
    save_array(cdir / "speech.bin", speech.audio_feats.feats, "speech_audio")
    for i, f in enumerate(render_clip(lm, ident, size)):
        img = np.round(f * 255.0).astype(np.uint8)
        Image.fromarray(img).save(cdir / "frames" / f"{i:06d}.png", optimize=False)
    meta = {"name": name, "id_label": id_label, "clip_index": clip_index, "split": split,
            "n_frames": n_frames, "fps": 25.0, "clip_seed": clip_seed, "identity": ident.to_dict()}
    (cdir / "meta.json").write_text(json.dumps(meta, indent=1))
    files = sorted(p for p in cdir.rglob("*") if p.is_file())
    meta["files"] = {str(p.relative_to(out)): _sha256(p) for p in files}
    return meta


def make_dataset(out, n_ids: int = 30, clips_per_id: int = 2, frames_per_clip: int = 100,
                 seed: int = 0, image_size: int = 64, workers: int = 1) -> Path:
    """Generate the corpus under ``out``; the last clip of each identity is held out."""
    if min(n_ids, clips_per_id, frames_per_clip) < 1:
        raise ValidationError("n_ids, clips_per_id and frames_per_clip must all be >= 1")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    jobs = []
    for i in range(n_ids):
        for c in range(clips_per_id):
            split = "holdout" if clips_per_id > 1 and c == clips_per_id - 1 else "train"
            jobs.append((out, seed, i, c, frames_per_clip, image_size, split))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        metas = list(pool.map(lambda a: _write_clip(*a), jobs))
    manifest = {
        "format": "lipmotion-synth/1",
        "seed": seed,
        "n_ids": n_ids,
        "clips_per_id": clips_per_id,
        "frames_per_clip": frames_per_clip,
        "image_size": image_size,
        "topology": "desk-48",
        "clips": [{k: m[k] for k in ("name", "id_label", "clip_index", "split", "n_frames", "files")}
                  for m in metas],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    log.info("wrote %d clips to %s", len(metas), out)
    return out


def load_dataset(root, verify: bool = False) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ValidationError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    topo = load_topology(manifest["topology"])
    clips = []
    for entry in manifest["clips"]:
        if verify:
            for rel, digest in entry["files"].items():
                if _sha256(root / rel) != digest:
                    raise ValidationError(f"checksum mismatch for {root / rel}")
        meta = json.loads((root / "clips" / entry["name"] / "meta.json").read_text())
        clips.append(ClipRecord(root, entry["name"], entry["id_label"], entry["clip_index"], entry["split"],
                                IdentityParams.from_dict(meta["identity"]), topo))
    return Dataset(root, manifest, clips)
