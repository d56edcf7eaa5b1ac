"""Torch helpers shared by the three trainable stages: seeding, checkpoints, schedules."""
from __future__ import annotations

import dataclasses
import json
import math
import random
from pathlib import Path

import numpy as np
import torch

from .core_types import ConfigurationError, load_array, read_header, save_array


def seed_everything(seed: int, deterministic: bool = True) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)
    return torch.Generator().manual_seed(seed)


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """[...] integer or real positions -> [..., dim] sin/cos features."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.nn.functional.pad(emb, (0, 1))
    return emb


def inverse_sqrt_lambda(warmup: int):
    """LR multiplier: linear warm-up then decay with 1/sqrt(step)."""
    warmup = max(1, warmup)

    def f(step: int) -> float:
        step = step + 1
        return min(step / warmup, math.sqrt(warmup / step))

    return f


# --------------------------------------------------------------------------
# checkpoints: one flat array file per tensor + meta.json


def _fname(key: str) -> str:
    return key.replace("/", "_") + ".bin"


def save_checkpoint(directory, modules: dict[str, torch.nn.Module], meta: dict) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    index = {}
    for prefix, module in modules.items():
        for key, tensor in module.state_dict().items():
            full = f"{prefix}.{key}"
            save_array(d / _fname(full), tensor.detach().cpu().numpy(), tag=full)
            index[full] = _fname(full)
    meta = dict(meta)
    meta["tensors"] = index
    (d / "meta.json").write_text(json.dumps(meta, indent=1, default=_json_default))
    return d


def load_meta(directory) -> dict:
    path = Path(directory) / "meta.json"
    if not path.exists():
        raise ConfigurationError(f"no checkpoint at {directory}")
    return json.loads(path.read_text())


def load_state(directory, modules: dict[str, torch.nn.Module]) -> dict:
    d = Path(directory)
    meta = load_meta(d)
    for prefix, module in modules.items():
        own = module.state_dict()
        state = {}
        for key, ref in own.items():
            full = f"{prefix}.{key}"
            if full not in meta["tensors"]:
                raise ConfigurationError(f"{d}: checkpoint lacks tensor {full}")
            fname = d / meta["tensors"][full]
            arr = load_array(fname, expect_tag=full)
            if tuple(arr.shape) != tuple(ref.shape):
                raise ConfigurationError(f"{d}: {full} has shape {arr.shape}, model expects {tuple(ref.shape)}")
            state[key] = torch.from_numpy(arr).to(ref.dtype)
        module.load_state_dict(state)
    return meta


def checkpoint_tensor_shape(directory, key: str) -> tuple:
    meta = load_meta(directory)
    return read_header(Path(directory) / meta["tensors"][key])["shape"]


def _json_default(o):
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def count_params(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
