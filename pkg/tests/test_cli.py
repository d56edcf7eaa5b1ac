import json

import numpy as np
import pytest

from lipmotion.cli import main
from lipmotion.config import parse_override, resolve_config, stage_config
from lipmotion.core_types import ConfigurationError, load_array

TINY_SETS = [
    "identity.epochs=2", "identity.hidden_dim=32", "identity.embed_dim=16",
    "motion.epochs=1", "motion.conformer_layers=1", "motion.hidden_dim=32", "motion.ffn_dim=64", "motion.heads=2",
    "motion.audio_encoder_layers=1", "motion.audio_heads=2", "motion.diffusion_steps=20",
    "appearance.epochs=1", "appearance.hidden_dim=16", "appearance.resblocks_encoder=1",
    "appearance.resblocks_decoder=1", "appearance.resblocks_fusion=1", "appearance.disc_hidden=8",
    "appearance.frames_per_clip=2",
]


def run(wd, *args):
    flags = ["--workdir", str(wd)]
    for s in TINY_SETS:
        flags += ["--set", s]
    return main(flags + list(args))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    wd = tmp_path_factory.mktemp("cli")
    assert run(wd, "synth-data", "--out", "data", "--ids", "3", "--clips", "2", "--frames", "10") == 0
    return wd


def test_override_parsing():
    assert parse_override("motion.epochs=50") == {"motion": {"epochs": 50}}
    assert parse_override("appearance.reference_mode=single_full") == {"appearance": {"reference_mode": "single_full"}}
    with pytest.raises(ConfigurationError):
        parse_override("motion.epochs")


def test_config_precedence(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("motion:\n  epochs: 7\n  lr: 0.5\n")
    cfg = resolve_config(None, f, ["motion.epochs=9"])
    assert cfg["motion"]["epochs"] == 9 and cfg["motion"]["lr"] == 0.5
    assert stage_config(cfg, "motion").epochs == 9
    with pytest.raises(ConfigurationError):
        resolve_config(None, None, ["motion.nope=1"])
    with pytest.raises(ConfigurationError):
        resolve_config("huge")


def test_usage_errors(tmp_path, capsys):
    assert main(["--workdir", str(tmp_path), "synth-data"]) == 2
    assert "--out" in capsys.readouterr().err
    assert main(["bogus"]) == 2
    assert main(["--workdir", str(tmp_path), "train", "identity"]) == 2
    assert main(["--workdir", str(tmp_path), "--set", "motion.nope=3", "train", "motion"]) == 2


def test_motion_needs_identity(workdir, capsys):
    assert run(workdir, "train", "motion", "--out", "checkpoints/motion_early") == 2
    assert "identity" in capsys.readouterr().err


def test_paper_preset_is_shape_only(tmp_path, capsys):
    assert main(["--workdir", str(tmp_path), "--preset", "paper", "--set", "appearance.image_size=64",
                 "train", "appearance"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["mode"] == "shape-check"
    assert out["shapes"]["image"] == [1, 3, 64, 64]


def test_full_workflow(workdir, capsys):
    for stage in ("identity", "motion", "appearance"):
        assert run(workdir, "train", stage) == 0, stage
        assert (workdir / "checkpoints" / stage / "resolved_config.json").exists()
        assert json.loads((workdir / "checkpoints" / stage / "loss_log.json").read_text())
    capsys.readouterr()
    assert run(workdir, "infer", "--clip", "id000_c00", "--speech", "id001_c00", "--out", "out1") == 0
    assert "unpaired" in capsys.readouterr().out
    clip = load_array(workdir / "out1" / "clip.bin", expect_tag="frames")
    assert clip.shape == (10, 64, 64, 3) and np.all((clip >= 0) & (clip <= 1))
    assert len(list((workdir / "out1" / "frames").glob("*.png"))) == 10
    assert run(workdir, "--seed", "4", "eval", "--max-clips", "1") == 0
    report = json.loads((workdir / "reports" / "eval_holdout.json").read_text())
    assert report["n_clips"] == 1 and np.isfinite(report["psnr"])
    assert "sync_corr =" in capsys.readouterr().out
    assert run(workdir, "infer", "--clip", "missing") == 2
