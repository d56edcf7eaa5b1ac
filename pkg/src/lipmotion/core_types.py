"""Shared domain types, landmark partitions and the flat array container.

Everything here is immutable after construction: numpy payloads are copied
and flagged read-only so instances can be shared across threads.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

MAX_SEQ_LEN = 250


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class ConfigurationError(RuntimeError):
    """Checkpoints, presets or run configuration are inconsistent."""


def _frozen(a, dtype=None) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


# --------------------------------------------------------------------------
# topology


@dataclass(frozen=True)
class LandmarkTopology:
    name: str
    total_points: int
    lower_face_idx: tuple[int, ...]
    upper_face_idx: tuple[int, ...]
    compact_idx: tuple[int, ...]
    remaining_idx: tuple[int, ...]
    lip_hull_idx: tuple[int, ...]
    groups: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        full = set(range(self.total_points))
        for a, b, what in (
            (self.lower_face_idx, self.upper_face_idx, "lower/upper"),
            (self.compact_idx, self.remaining_idx, "compact/remaining"),
        ):
            sa, sb = set(a), set(b)
            if sa & sb or (sa | sb) != full or len(sa) != len(a) or len(sb) != len(b):
                raise ValidationError(f"{self.name}: {what} is not a partition of 0..{self.total_points - 1}")
        if not set(self.lip_hull_idx) <= set(self.lower_face_idx):
            raise ValidationError(f"{self.name}: lip hull must lie in the lower face")

    @cached_property
    def lower_compact_idx(self) -> np.ndarray:
        """Points diffused by the motion model (compact and lower face), sorted."""
        return np.array(sorted(set(self.compact_idx) & set(self.lower_face_idx)), dtype=np.int64)

    @cached_property
    def upper_compact_idx(self) -> np.ndarray:
        """Points fed to the backbone as the upper-face prefix, sorted."""
        return np.array(sorted(set(self.compact_idx) & set(self.upper_face_idx)), dtype=np.int64)

    @cached_property
    def copied_idx(self) -> np.ndarray:
        """Points the sampler copies verbatim from the source (upper face or remaining)."""
        gen = set(self.lower_compact_idx.tolist())
        return np.array([i for i in range(self.total_points) if i not in gen], dtype=np.int64)


def _expand(spec) -> tuple[int, ...]:
    if isinstance(spec, list):
        return tuple(int(i) for i in spec)
    out: list[int] = []
    for lo, hi in spec.get("ranges", []):
        out.extend(range(lo, hi))
    out.extend(int(i) for i in spec.get("indices", []))
    return tuple(sorted(out)) if "ranges" in spec and "indices" in spec else tuple(out)


def topology_from_dict(d: dict) -> LandmarkTopology:
    return LandmarkTopology(
        name=d["name"],
        total_points=int(d["total_points"]),
        lower_face_idx=_expand(d["lower_face_idx"]),
        upper_face_idx=_expand(d["upper_face_idx"]),
        compact_idx=_expand(d["compact_idx"]),
        remaining_idx=_expand(d["remaining_idx"]),
        lip_hull_idx=_expand(d["lip_hull_idx"]),
        groups={k: tuple(v) for k, v in d.get("groups", {}).items()},
    )


@lru_cache(maxsize=None)
def load_topology(name: str) -> LandmarkTopology:
    """Load a shipped topology preset ("desk-48" or "paper-669") or a JSON file path."""
    path = Path(name)
    if path.suffix == ".json" and path.exists():
        text = path.read_text()
    else:
        try:
            text = resources.files("lipmotion.presets").joinpath(f"{name}.json").read_text()
        except FileNotFoundError as exc:
            raise ConfigurationError(f"unknown topology preset {name!r}") from exc
    return topology_from_dict(json.loads(text))


# --------------------------------------------------------------------------
# sequences and features


@dataclass(frozen=True)
class LandmarkSequence:
    coords: np.ndarray
    topology: LandmarkTopology
    valid_len: int = -1

    def __post_init__(self):
        c = _frozen(self.coords, np.float32)
        if c.ndim != 3 or c.shape[2] != 2 or c.shape[1] != self.topology.total_points:
            raise ValidationError(
                f"coords shape {c.shape} does not match [N, {self.topology.total_points}, 2]"
            )
        if c.shape[0] > MAX_SEQ_LEN:
            raise ValidationError(f"sequence of {c.shape[0]} frames exceeds max_seq_len={MAX_SEQ_LEN}")
        if not np.all(np.isfinite(c)):
            raise ValidationError("landmark coords must be finite")
        object.__setattr__(self, "coords", c)
        if self.valid_len < 0:
            object.__setattr__(self, "valid_len", c.shape[0])
        if not 1 <= self.valid_len <= c.shape[0]:
            raise ValidationError(f"valid_len {self.valid_len} outside [1, {c.shape[0]}]")

    @property
    def n_frames(self) -> int:
        return self.coords.shape[0]


def pad_sequence(seq: LandmarkSequence, length: int = MAX_SEQ_LEN) -> LandmarkSequence:
    """Pad to ``length`` frames by repeating the last valid frame."""
    if length > MAX_SEQ_LEN:
        raise ValidationError(f"length {length} exceeds max_seq_len={MAX_SEQ_LEN}")
    valid = seq.coords[: seq.valid_len]
    if length < seq.valid_len:
        raise ValidationError("cannot pad to fewer frames than valid_len")
    reps = np.repeat(valid[-1:], length - seq.valid_len, axis=0)
    return LandmarkSequence(np.concatenate([valid, reps]), seq.topology, seq.valid_len)


@dataclass(frozen=True)
class SpeechFeature:
    """Speech conditioning rows; ``rows_per_frame`` is 1 (aligned) or 2 (audio rate)."""

    feats: np.ndarray
    rows_per_frame: int = 1

    def __post_init__(self):
        f = _frozen(self.feats, np.float32)
        if f.ndim != 2:
            raise ValidationError("speech feats must be [rows, D_s]")
        if not np.all(np.isfinite(f)):
            raise ValidationError("speech feats must be finite")
        if self.rows_per_frame not in (1, 2) or f.shape[0] % self.rows_per_frame:
            raise ValidationError("rows_per_frame must be 1 or 2 and divide the row count")
        object.__setattr__(self, "feats", f)

    @property
    def n_frames(self) -> int:
        return self.feats.shape[0] // self.rows_per_frame

    @property
    def dim(self) -> int:
        return self.feats.shape[1]

    def audio_rate(self) -> np.ndarray:
        """Rows at two per video frame, repeating rows if stored frame-aligned."""
        if self.rows_per_frame == 2:
            return self.feats
        return np.repeat(self.feats, 2, axis=0)


@dataclass(frozen=True)
class IdentityEmbedding:
    vec: np.ndarray

    def __post_init__(self):
        v = _frozen(self.vec, np.float32)
        if v.ndim != 1:
            raise ValidationError("identity embedding must be 1-D")
        if abs(float(np.linalg.norm(v)) - 1.0) > 1e-5:
            raise ValidationError("identity embedding must be unit-norm")
        object.__setattr__(self, "vec", v)


@dataclass(frozen=True)
class VideoClip:
    frames: np.ndarray
    fps: float = 25.0

    def __post_init__(self):
        f = _frozen(self.frames, np.float32)
        if f.ndim != 4 or f.shape[3] != 3 or f.shape[1] != f.shape[2]:
            raise ValidationError(f"clip frames must be [N, S, S, 3], got {f.shape}")
        if f.size and (f.min() < 0.0 or f.max() > 1.0):
            raise ValidationError("clip values must lie in [0, 1]")
        object.__setattr__(self, "frames", f)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class MaskSpec:
    mask: np.ndarray
    margin_frac: float = 0.1
    min_margin_px: float = 2.0

    def __post_init__(self):
        m = _frozen(self.mask, np.float32)
        if m.ndim != 2 or not np.all((m == 0) | (m == 1)):
            raise ValidationError("mask must be a binary [H, W] array")
        if not 0 < m.sum() < m.size:
            raise ValidationError("mask must be neither empty nor full")
        object.__setattr__(self, "mask", m)


@dataclass(frozen=True)
class DiffusionSchedule:
    alpha: np.ndarray

    def __post_init__(self):
        a = _frozen(self.alpha, np.float64)
        if a.ndim != 1 or a.size < 1 or np.any(a <= 0) or np.any(a >= 1):
            raise ValidationError("alpha must be a non-empty vector in (0, 1)")
        object.__setattr__(self, "alpha", a)
        if self.alpha_bar[-1] >= 1e-3:
            raise ValidationError(f"terminal alpha_bar {self.alpha_bar[-1]:.3g} is not below 1e-3")

    @property
    def T(self) -> int:
        return self.alpha.size

    @cached_property
    def alpha_bar(self) -> np.ndarray:
        return _frozen(np.cumprod(self.alpha))

    @cached_property
    def beta(self) -> np.ndarray:
        return _frozen(1.0 - self.alpha)

    @cached_property
    def alpha_bar_prev(self) -> np.ndarray:
        return _frozen(np.concatenate([[1.0], self.alpha_bar[:-1]]))


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear-beta schedule; alpha_t = 1 - beta_t."""
    if T < 2:
        raise ValidationError("T must be at least 2")
    if not 0 < beta_start <= beta_end < 1:
        raise ValidationError("need 0 < beta_start <= beta_end < 1")
    return DiffusionSchedule(1.0 - np.linspace(beta_start, beta_end, T))


def scaled_schedule(T: int) -> DiffusionSchedule:
    """Linear schedule with the usual 1e-4..0.02 endpoints rescaled by 1000/T."""
    s = 1000.0 / T
    return make_schedule(T, 1e-4 * s, min(0.02 * s, 0.999))


# --------------------------------------------------------------------------
# coordinate ops


def normalize_coords(pixel_coords, image_size: int) -> np.ndarray:
    p = np.asarray(pixel_coords, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > image_size):
        raise ValidationError(f"pixel coords must lie in [0, {image_size}]")
    return 2.0 * p / image_size - 1.0


def denormalize_coords(coords, image_size: int) -> np.ndarray:
    return (np.asarray(coords, dtype=np.float64) + 1.0) * 0.5 * image_size


def split_landmarks(seq: LandmarkSequence) -> tuple[np.ndarray, np.ndarray]:
    topo = seq.topology
    return seq.coords[:, list(topo.compact_idx)].copy(), seq.coords[:, list(topo.remaining_idx)].copy()


def merge_landmarks(compact: np.ndarray, remaining: np.ndarray, topology: LandmarkTopology,
                    valid_len: int = -1) -> LandmarkSequence:
    n = compact.shape[0]
    if compact.shape[1:] != (len(topology.compact_idx), 2) or remaining.shape != (
        n, len(topology.remaining_idx), 2,
    ):
        raise ValidationError("compact/remaining shapes do not match the topology")
    out = np.empty((n, topology.total_points, 2), dtype=np.float32)
    out[:, list(topology.compact_idx)] = compact
    out[:, list(topology.remaining_idx)] = remaining
    return LandmarkSequence(out, topology, valid_len)


# --------------------------------------------------------------------------
# flat array container
#
# One text header line with eight space-separated fields, then raw
# little-endian payload:
#   LMARR v1 dtype=f32 order=le ndim=3 shape=10,48,2 count=960 tag=landmarks

_MAGIC = "LMARR"
_DTYPES = {"f32": "<f4", "i32": "<i4", "u8": "u1"}
_CODES = {np.dtype("<f4"): "f32", np.dtype("<i4"): "i32", np.dtype("u1"): "u8"}


def save_array(path, array, tag: str = "array") -> None:
    a = np.asarray(array)
    if a.dtype.kind == "f":
        a = a.astype("<f4")
    elif a.dtype.kind in "iub" and a.dtype != np.uint8:
        a = a.astype("<i4")
    if " " in tag or not tag:
        raise ValidationError("tag must be a non-empty token without spaces")
    shape = ",".join(str(s) for s in a.shape) or "-"
    header = (
        f"{_MAGIC} v1 dtype={_CODES[a.dtype]} order=le ndim={a.ndim} "
        f"shape={shape} count={a.size} tag={tag}\n"
    )
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(np.ascontiguousarray(a).tobytes())
    except OSError as exc:
        raise OSError(f"failed writing array to {path}: {exc}") from exc


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        line = fh.readline().decode("ascii").rstrip("\n")
    return _parse_header(line, path)


def _parse_header(line: str, path) -> dict:
    fields = line.split(" ")
    if len(fields) != 8 or fields[0] != _MAGIC or fields[1] != "v1":
        raise ValidationError(f"{path}: not an {_MAGIC} v1 array file")
    kv = dict(f.split("=", 1) for f in fields[2:])
    shape = () if kv["shape"] == "-" else tuple(int(s) for s in kv["shape"].split(","))
    return {"dtype": kv["dtype"], "shape": shape, "count": int(kv["count"]), "tag": kv["tag"],
            "ndim": int(kv["ndim"]), "order": kv["order"]}


def load_array(path, expect_tag: str | None = None) -> np.ndarray:
    with open(path, "rb") as fh:
        line = fh.readline().decode("ascii").rstrip("\n")
        meta = _parse_header(line, path)
        data = fh.read()
    if meta["order"] != "le" or meta["dtype"] not in _DTYPES:
        raise ValidationError(f"{path}: unsupported dtype/order")
    if expect_tag is not None and meta["tag"] != expect_tag:
        raise ValidationError(f"{path}: expected tag {expect_tag!r}, found {meta['tag']!r}")
    dt = np.dtype(_DTYPES[meta["dtype"]])
    if len(data) != meta["count"] * dt.itemsize or len(meta["shape"]) != meta["ndim"]:
        raise ValidationError(f"{path}: payload size does not match header")
    return np.frombuffer(data, dtype=dt).reshape(meta["shape"]).copy()


def stack_sequences(seqs: Sequence[LandmarkSequence]) -> np.ndarray:
    return np.stack([s.coords for s in seqs])
