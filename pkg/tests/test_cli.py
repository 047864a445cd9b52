import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from motioncorr import gradsuite
from motioncorr.checkpoint import load_checkpoint
from motioncorr.cli import apply_overrides, main, resolve_train_config
from motioncorr.errors import ConfigError
from motioncorr.motion_sim import ZERO_STATE, MotionTrajectory, Ordering, save_trajectory
from motioncorr.volume_io import load_volume

TINY_NET = [
    "--set", "net.levels=2", "--set", "net.encoder_channels=[4,8]", "--set", "net.cbam_reduction=2",
    "--set", "net.input_size=[32,32]",
]


@pytest.fixture(scope="module")
def phantoms(tmp_path_factory):
    out = tmp_path_factory.mktemp("ph")
    assert main(["phantom", "--seed", "20", "--dims", "32,32,16", "--count", "5", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(phantoms, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    args = ["--deterministic", "train", "--data", str(phantoms), "--out", str(out),
            "--set", "epochs=2", "--set", "batch_size=8"] + TINY_NET
    assert main(args) == 0
    return out


# ---------------------------------------------------------------- config helpers


def test_overrides():
    cfg = apply_overrides({"net": {"levels": 4}}, ["net.levels=2", "name=abc", "seed=3"])
    assert cfg == {"net": {"levels": 2}, "name": "abc", "seed": 3}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_resolve_train_config(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"epochs": 7, "net": {"levels": 3, "encoder_channels": [8, 16, 32]}}))
    cfg, data_seed, full = resolve_train_config(tmp_path / "c.json", ["net.cbam_reduction=2", "seed=5"])
    assert cfg.epochs == 7 and cfg.net.levels == 3 and cfg.net.cbam_reduction == 2
    assert data_seed == 5
    assert full["batch_size"] == 10 and full["lr0"] == 1e-3 and full["data_seed"] == 5


# ---------------------------------------------------------------- phantom / simulate


def test_phantom_manifest(phantoms):
    files = sorted(phantoms.glob("*.mvol"))
    assert [f.name for f in files] == [f"phantom_{i:03d}.mvol" for i in range(5)]
    m = json.loads((phantoms / "manifest.json").read_text())
    assert m["command"] == "phantom" and m["seeds"] == {"seed": 20}
    assert m["config"]["dims"] == [32, 32, 16] and len(m["outputs"]) == 5
    assert {"argv", "version", "duration_s", "cwd", "inputs"} <= set(m)


def test_simulate_zero_trajectory_is_identity(phantoms, tmp_path):
    traj = tmp_path / "zero.mtraj"
    save_trajectory(MotionTrajectory.constant(ZERO_STATE, 32), traj)
    out = tmp_path / "c.mvol"
    code = main(["simulate", "--in", str(phantoms / "phantom_000.mvol"), "--traj-in", str(traj), "--out", str(out)])
    assert code == 0
    src = load_volume(phantoms / "phantom_000.mvol").data
    assert np.abs(load_volume(out).data - src).max() < 1e-4


def test_simulate_writes_trajectories_and_replays(phantoms, tmp_path, capsys):
    out = tmp_path / "sim" / "c.mvol"
    code = main(["--deterministic", "simulate", "--in", str(phantoms / "phantom_001.mvol"), "--preset", "severe",
                 "--seed", "4", "--out", str(out)])
    assert code == 0
    assert "vs input: SSIM" in capsys.readouterr().out
    trajs = sorted((tmp_path / "sim" / "c_traj").glob("*.mtraj"))
    assert len(trajs) == 16
    first = out.read_bytes()
    out.unlink()
    assert main(["replay", str(tmp_path / "sim" / "manifest.json")]) == 0
    assert out.read_bytes() == first
    # re-applying the recorded trajectories reproduces the corruption
    again = tmp_path / "again.mvol"
    assert main(["simulate", "--in", str(phantoms / "phantom_001.mvol"), "--traj-in",
                 str(tmp_path / "sim" / "c_traj"), "--out", str(again)]) == 0
    assert again.read_bytes() == first


def test_simulate_3d(tmp_path):
    ph = tmp_path / "ph"
    assert main(["phantom", "--dims", "32,32,32", "--out", str(ph)]) == 0
    out = tmp_path / "c3.mvol"
    code = main(["simulate", "--in", str(ph / "phantom_000.mvol"), "--mode", "3d", "--preset", "mild",
                 "--out", str(out), "--traj-out", str(tmp_path / "t")])
    assert code == 0
    assert (tmp_path / "t" / "volume.mtraj").exists()
    assert load_volume(out).data.shape == (32, 32, 32)


def test_simulate_ordering_mismatch(phantoms, tmp_path):
    traj = tmp_path / "p.mtraj"
    save_trajectory(MotionTrajectory.constant(ZERO_STATE, 32, Ordering.POINTS3D), traj)
    code = main(["simulate", "--in", str(phantoms / "phantom_000.mvol"), "--traj-in", str(traj),
                 "--out", str(tmp_path / "x.mvol")])
    assert code == 1


# ---------------------------------------------------------------- exit codes


def test_exit_codes(phantoms, tmp_path):
    assert main(["simulate", "--in", str(tmp_path / "missing.mvol"), "--out", str(tmp_path / "x.mvol")]) == 3
    assert main(["phantom", "--dims", "60,64,16", "--out", str(tmp_path / "p")]) == 1
    (tmp_path / "bad.json").write_text("{oops")
    assert main(["train", "--data", str(phantoms), "--config", str(tmp_path / "bad.json")]) == 3
    assert main(["train", "--data", str(phantoms), "--set", "epochs=0"]) == 1
    (tmp_path / "junk.mvol").write_bytes(b"garbage")
    assert main(["simulate", "--in", str(tmp_path / "junk.mvol"), "--out", str(tmp_path / "y.mvol")]) == 3


def test_default_output_dir_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv("MOTIONCORR_OUT", str(tmp_path / "envout"))
    assert main(["phantom", "--dims", "32,32,16"]) == 0
    assert (tmp_path / "envout" / "phantoms" / "phantom_000.mvol").exists()


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "motioncorr.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()


# ---------------------------------------------------------------- severity study


def test_severity_study_command(phantoms, tmp_path, capsys):
    out = tmp_path / "sev"
    assert main(["severity-study", "--phantoms", str(phantoms), "--seeds", "1", "--out", str(out)]) == 0
    r2 = json.loads((out / "severity_r2.json").read_text())["r2"]
    assert sum(len(v) for v in r2.values()) == 9
    assert "0.9243" in capsys.readouterr().out


# ---------------------------------------------------------------- train / evaluate


def test_train_outputs(trained):
    for name in ("best.mckpt", "last.mckpt", "curves.csv", "batch_log.json", "split.json", "manifest.json"):
        assert (trained / name).exists()
    m = json.loads((trained / "manifest.json").read_text())
    assert m["config"]["batch_size"] == 8 and m["config"]["lr0"] == 1e-3
    assert m["config"]["net"]["encoder_channels"] == [4, 8]
    assert m["config"]["deterministic"] is True
    split = json.loads((trained / "split.json").read_text())
    log = json.loads((trained / "batch_log.json").read_text())
    assert not {sid for e in log for sid, _ in e["images"]} & set(split["test_subjects"])


def test_train_replay_bit_identical(trained):
    first = (trained / "last.mckpt").read_bytes()
    (trained / "last.mckpt").unlink()
    assert main(["replay", str(trained / "manifest.json")]) == 0
    assert (trained / "last.mckpt").read_bytes() == first


def test_evaluate_with_diff_maps(trained, phantoms, tmp_path, capsys):
    out = tmp_path / "ev"
    code = main(["evaluate", "--checkpoint", str(trained / "best.mckpt"), "--data", str(phantoms),
                 "--out", str(out), "--diff-maps"])
    assert code == 0
    assert "SSIM" in capsys.readouterr().out
    split = json.loads((trained / "split.json").read_text())
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["subject_id"] for r in rows} == set(split["test_subjects"])
    diffs = sorted((out / "diff").glob("*.mvol"))
    assert [d.stem for d in diffs] == sorted(split["test_subjects"])
    d = load_volume(diffs[0]).data
    assert d.shape == (16, 32, 32) and d.min() >= -1 and d.max() <= 1
    ckpt = load_checkpoint(trained / "best.mckpt")
    assert ckpt.meta["data_seed"] == 0


def test_evaluate_abs_diff(trained, phantoms, tmp_path):
    out = tmp_path / "ev"
    assert main(["evaluate", "--checkpoint", str(trained / "best.mckpt"), "--data", str(phantoms),
                 "--out", str(out), "--diff-maps", "--abs-diff", "--all-subjects"]) == 0
    assert len(list((out / "diff").glob("*.mvol"))) == 5
    assert all(load_volume(p).data.min() >= 0 for p in (out / "diff").glob("*.mvol"))


def test_resume_from_cli(trained, phantoms, tmp_path):
    out = tmp_path / "r"
    args = ["--deterministic", "train", "--data", str(phantoms), "--out", str(out), "--resume",
            str(trained / "last.mckpt"), "--set", "epochs=3", "--set", "batch_size=8"] + TINY_NET
    assert main(args) == 0
    assert load_checkpoint(out / "last.mckpt").epoch == 3


# ---------------------------------------------------------------- ablate / gradcheck


def test_ablate_prints_reference_row(tmp_path, capsys):
    spec = {
        "phantoms": {"count": 3, "dims": [32, 32, 16], "seed": 0},
        "train": {"epochs": 1, "batch_size": 16,
                  "net": {"levels": 2, "encoder_channels": [4, 8], "cbam_reduction": 2, "input_size": [32, 32]}},
    }
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert main(["ablate", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "ab")]) == 0
    text = capsys.readouterr().out
    line = next(l for l in text.splitlines() if "corrupted" in l)
    assert "71.66" in line and "99.25" in line and "28.83" in line
    rows = json.loads((tmp_path / "ab" / "ablation.json").read_text())
    assert len(rows) == 5


def test_gradcheck_subset_ok(tmp_path):
    out = tmp_path / "gc"
    assert main(["gradcheck", "--ops", "add,relu,conv2d_3x3,cbam", "--trials", "2", "--out", str(out)]) == 0
    res = json.loads((out / "gradcheck.json").read_text())
    assert [r["op"] for r in res] == ["add", "relu", "conv2d_3x3", "cbam"]


def test_gradcheck_failure_exit_2(tmp_path, monkeypatch):
    monkeypatch.setattr(gradsuite, "GRADCHECK_TOLERANCE", 0.0)
    out = tmp_path / "gc"
    assert main(["gradcheck", "--ops", "mul", "--trials", "1", "--out", str(out)]) == 2
    assert (out / "manifest.json").exists()


def test_gradcheck_unknown_op(tmp_path):
    assert main(["gradcheck", "--ops", "bogus", "--out", str(tmp_path)]) == 1
