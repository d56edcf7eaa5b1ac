"""Command-line entry point: ``lipmotion <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import resolve_config, save_resolved, stage_config
from .core_types import ConfigurationError, ValidationError, load_topology, save_array

log = logging.getLogger("lipmotion")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _paths(args):
    wd = Path(args.workdir)
    return {
        "data": wd / (args.data if getattr(args, "data", None) else "data"),
        "ckpt": wd / "checkpoints",
        "outputs": wd / "outputs",
        "reports": wd / "reports",
    }


def _dataset(args):
    from .synth_data import load_dataset

    root = _paths(args)["data"]
    if not (root / "manifest.json").exists():
        raise ConfigurationError(f"no dataset at {root}; run synth-data first")
    return load_dataset(root)


def _require_ckpt(path: Path, what: str) -> Path:
    if not (path / "meta.json").exists():
        raise ConfigurationError(f"{what} checkpoint missing at {path}; train {what} first")
    return path


# --------------------------------------------------------------------------
# shape-only checks for large presets


def shape_check(stage: str, cfg) -> dict:
    """Build the stage's model at ``cfg`` dimensions and run one tiny forward pass; returns shapes."""
    from .appearance import AppearanceModel
    from .identity import IdentityExtractor
    from .motion import MotionDiffusion

    torch.manual_seed(0)
    with torch.no_grad():
        if stage == "identity":
            m = IdentityExtractor(cfg)
            out = m(torch.randn(2, cfg.n_points, 2) * 0.3)
            return {"input": [2, cfg.n_points, 2], "embedding": list(out.shape)}
        if stage == "motion":
            topo = load_topology(cfg.topology)
            m = MotionDiffusion(cfg, topo).eval()
            n = 4
            x = torch.randn(1, n, m.n_low)
            upper = torch.randn(1, n, len(topo.upper_compact_idx), 2) * 0.3
            audio = torch.randn(1, 2 * n, cfg.speech_dim)
            out = m(x, torch.tensor([cfg.diffusion_steps - 1]), upper, audio, _unit(torch.randn(1, cfg.id_dim)),
                    torch.randn(1, topo.total_points, 2) * 0.3)
            return {"noisy": list(x.shape), "prediction": list(out.shape), "points": topo.total_points}
        if stage == "appearance":
            m = AppearanceModel(cfg).eval()
            s = cfg.image_size
            refs = torch.rand(1, cfg.k_ref, 3, s, s)
            z_lip = m.encode_lip(refs)
            z_nl = m.encode_nonlip(torch.rand(1, 3, s, s))
            z_m = m.encode_motion(torch.rand(1, 3, s, s))
            mean, _ = m.fuse(z_lip, z_nl)
            img = m.decode(mean, z_m)
            return {"lip": list(z_lip.shape), "nonlip": list(z_nl.shape), "motion": list(z_m.shape),
                    "fused": list(mean.shape), "image": list(img.shape)}
    raise UsageError(f"unknown stage {stage}")


def _unit(x):
    return torch.nn.functional.normalize(x, dim=-1)


# --------------------------------------------------------------------------
# commands


def cmd_synth_data(args, cfg) -> int:
    from .synth_data import load_dataset, make_dataset

    if not args.out:
        raise UsageError("synth-data needs --out")
    d = cfg["data"]
    out = Path(args.workdir) / args.out
    ds = load_dataset(make_dataset(out, n_ids=d["ids"], clips_per_id=d["clips"], frames_per_clip=d["frames"],
                                   seed=d["seed"], image_size=d["image_size"], workers=args.workers))
    save_resolved(cfg, out)
    print(f"wrote {len(ds.clips)} clips to {out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    stage = args.stage
    scfg = stage_config(cfg, stage)
    out = Path(args.out) if args.out else _paths(args)["ckpt"] / stage
    if not out.is_absolute():
        out = Path(args.workdir) / out
    if cfg["preset"] != "desk":
        shapes = shape_check(stage, scfg)
        print(json.dumps({"stage": stage, "preset": cfg["preset"], "mode": "shape-check", "shapes": shapes}))
        return EXIT_OK
    if stage == "motion":
        id_ckpt = _require_ckpt(_paths(args)["ckpt"] / "identity", "identity")
    ds = _dataset(args)
    if stage == "identity":
        from .identity import train_identity

        _, _, history = train_identity(ds, scfg, out)
        print(f"identity: final val accuracy {history[-1].get('val_accuracy')}")
    elif stage == "motion":
        from .identity import load_identity
        from .motion import train_motion

        _, history = train_motion(ds, scfg, load_identity(id_ckpt), out)
        print(f"motion: final loss {history[-1]['total']:.5f}")
    else:
        from .appearance import train_appearance

        _, _, history = train_appearance(ds, scfg, out, eval_every=max(1, scfg.epochs // 4))
        print(f"appearance: final l1 {history[-1]['l1']:.5f} val psnr {history[-1].get('val_psnr')}")
    save_resolved(cfg, out)
    (out / "loss_log.json").write_text(json.dumps(history, indent=1))
    return EXIT_OK


def _job_for(ds, ckpt: Path, clip_name: str, speech_name: str | None, seed: int):
    from .core_types import VideoClip
    from .pipeline import LipSyncJob

    by_name = {c.name: c for c in ds.clips}
    for n in (clip_name, speech_name):
        if n is not None and n not in by_name:
            raise ValidationError(f"unknown clip {n!r}")
    src = by_name[clip_name]
    sp = by_name[speech_name or clip_name]
    if sp.n_frames != src.n_frames:
        raise ValidationError("speech clip and source clip differ in length")
    job = LipSyncJob(VideoClip(src.frames), src.landmarks, sp.speech.audio_feats,
                     _require_ckpt(ckpt / "motion", "motion"), _require_ckpt(ckpt / "appearance", "appearance"),
                     _require_ckpt(ckpt / "identity", "identity"), seed)
    return job, src, sp


def cmd_infer(args, cfg) -> int:
    from PIL import Image

    from .pipeline import lipsync_detailed

    ds = _dataset(args)
    clip_name = args.clip or ds.split("holdout")[0].name
    job, src, sp = _job_for(ds, _paths(args)["ckpt"], clip_name, args.speech, cfg["seed"])
    res = lipsync_detailed(job)
    out = Path(args.out) if args.out else _paths(args)["outputs"] / f"{clip_name}__{sp.name}"
    if not out.is_absolute():
        out = Path(args.workdir) / out
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(res.clip.frames):
        Image.fromarray((f * 255).round().astype(np.uint8)).save(out / "frames" / f"{i:06d}.png")
    save_array(out / "clip.bin", res.clip.frames, "frames")
    save_array(out / "landmarks.bin", res.landmarks.coords, "landmarks")
    save_resolved(cfg, out)
    mode = "paired" if sp.name == src.name else "unpaired"
    print(f"{mode} lipsync of {src.name} with speech from {sp.name}: {res.clip.n_frames} frames -> {out}")
    return EXIT_OK


def evaluate_split(ds, ckpt: Path, split: str, seed: int, max_clips: int | None = None, probe=None):
    from .metrics import EvalReport, id_sim, psnr, ssim, sync_corr
    from .pipeline import lipsync_detailed

    rows = []
    for c in ds.split(split)[:max_clips]:
        job, _, _ = _job_for(ds, ckpt, c.name, None, seed)
        res = lipsync_detailed(job)
        row = {"clip": c.name, "psnr": psnr(res.clip.frames, c.frames), "ssim": ssim(res.clip.frames, c.frames),
               "sync_corr": sync_corr(res.landmarks.coords, c.speech, c.topology), "id_sim": None}
        if probe is not None:
            row["id_sim"] = id_sim(res.clip.frames, c.frames, probe)
        rows.append(row)
    return EvalReport.from_clips(rows)


def _probe(args, ds):
    from .metrics import load_probe, train_probe

    p = _paths(args)["ckpt"] / "probe"
    if (p / "meta.json").exists():
        return load_probe(p)
    probe, acc = train_probe(ds, out_dir=p)
    log.info("identity probe held-out accuracy %.3f", acc)
    return probe


def cmd_eval(args, cfg) -> int:
    ds = _dataset(args)
    report = evaluate_split(ds, _paths(args)["ckpt"], args.split, cfg["seed"], args.max_clips, _probe(args, ds))
    out = _paths(args)["reports"] / f"eval_{args.split}.json"
    report.to_json(out)
    save_resolved(cfg, out.parent)
    print(report.to_text())
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    from .identity import load_identity
    from .metrics import run_ablation

    ds = _dataset(args)
    if args.suite == "reference_modes":
        base, extractor = stage_config(cfg, "appearance"), None
    else:
        base = stage_config(cfg, "motion")
        extractor = load_identity(_require_ckpt(_paths(args)["ckpt"] / "identity", "identity"))
    out = _paths(args)["reports"] / "ablation" / args.suite
    report = run_ablation(args.suite, ds, base, extractor, out, seed=cfg["seed"])
    save_resolved(cfg, out)
    print(report["text"])
    return EXIT_OK if not all(r["error"] for r in report["rows"]) else EXIT_RUNTIME


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lipmotion", description=__doc__.splitlines()[0])
    p.add_argument("--workdir", default=".", help="base directory for all relative paths")
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. motion.epochs=50 (repeatable)")
    p.add_argument("--preset", choices=["desk", "paper"], help="model size preset (paper = shape checks only)")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--deterministic", action="store_true", help="single-threaded math, fixed seeds")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="generate the synthetic talking-face corpus")
    s.add_argument("--out", help="output directory (required)")
    s.add_argument("--ids", type=int)
    s.add_argument("--clips", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--size", type=int, dest="image_size")
    s.add_argument("--data-seed", type=int, dest="data_seed")
    s.add_argument("--workers", type=int, default=1)

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("stage", choices=["identity", "motion", "appearance"])
    t.add_argument("--data", help="dataset directory (default: data)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", help="checkpoint directory (default: checkpoints/<stage>)")

    i = sub.add_parser("infer", help="lip-sync one clip")
    i.add_argument("--data")
    i.add_argument("--clip", help="source clip name (default: first held-out clip)")
    i.add_argument("--speech", help="clip whose speech drives the lips (default: the source's own)")
    i.add_argument("--out")

    e = sub.add_parser("eval", help="evaluate the full pipeline on a split")
    e.add_argument("--data")
    e.add_argument("--split", default="holdout", choices=["train", "holdout"])
    e.add_argument("--max-clips", type=int)

    a = sub.add_parser("ablate", help="run an ablation suite")
    a.add_argument("--data")
    a.add_argument("--suite", required=True, choices=["cond_modes", "id_loss_weights", "reference_modes"])
    return p


def _apply_flags(args, cfg: dict) -> dict:
    if args.seed is not None:
        cfg["seed"] = args.seed
        for stage in ("identity", "motion", "appearance"):
            cfg[stage]["seed"] = args.seed
    if args.deterministic:
        cfg["deterministic"] = True
    if args.command == "synth-data":
        for k, src in (("ids", "ids"), ("clips", "clips"), ("frames", "frames"), ("image_size", "image_size"),
                       ("seed", "data_seed")):
            v = getattr(args, src)
            if v is not None:
                cfg["data"][k] = v
    if args.command == "train" and args.epochs is not None:
        cfg[args.stage]["epochs"] = args.epochs
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _apply_flags(args, resolve_config(args.preset, args.config, args.overrides))
        if cfg["deterministic"]:
            torch.set_num_threads(1)
            torch.use_deterministic_algorithms(True, warn_only=True)
        handler = {"synth-data": cmd_synth_data, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
                   "ablate": cmd_ablate}[args.command]
        return handler(args, cfg)
    except (UsageError, ConfigurationError, ValidationError) as exc:
        print(f"lipmotion: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"lipmotion: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
