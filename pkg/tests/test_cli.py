import json
import subprocess
import sys

import pytest

from ncgmm import cli
from ncgmm import policy as pol
from ncgmm.trainer import load_history

SMALL = """\
seed = 1
[scenarios]
n_train = 16
n_dev = 4
horizon = 10
[trainer]
epochs = 4
warmup_epochs = 1
batch_size = 8
[policy]
hidden = 4
[eval]
steps = 60
transient = 10
band_dwell = 20
"""

ARTIFACTS = ["train.csv", "dev.csv", "data_meta.json", "policy.ckpt", "history.csv",
             "trajectory.csv", "trajectory.svg", "metrics.txt", "metrics.json"]


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv("NCGMM_SEED", raising=False)


def _run(*argv):
    return cli.main([str(a) for a in argv])


def _blobs(d):
    return {name: (d / name).read_bytes() for name in ARTIFACTS}


def test_run_all_artifacts_and_determinism(tmp_path, small_cfg, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run("run-all", "--config", small_cfg, "--out", a) == 0
    out = capsys.readouterr().out
    assert "final dev loss:" in out and "time_in_band_fraction=" in out
    assert _run("run-all", "--config", small_cfg, "--out", b, "--threads", "3") == 0
    assert _blobs(a) == _blobs(b)
    meta = json.loads((a / "data_meta.json").read_text())
    assert meta["seed"] == 1 and meta["n_train"] == 16 and meta["N"] == 10
    assert len((a / "trajectory.csv").read_text().splitlines()) == 61


def test_staged_pipeline_matches_run_all(tmp_path, small_cfg):
    full, data, model_dir, ev = (tmp_path / n for n in ("full", "data", "model", "ev"))
    assert _run("run-all", "--config", small_cfg, "--out", full) == 0
    assert _run("gen-data", "--config", small_cfg, "--out", data) == 0
    assert _run("train", "--config", small_cfg, "--data", data, "--out", model_dir) == 0
    assert _run("eval", "--config", small_cfg, "--checkpoint", model_dir / "policy.ckpt", "--out", ev) == 0
    assert (data / "train.csv").read_bytes() == (full / "train.csv").read_bytes()
    assert (model_dir / "policy.ckpt").read_bytes() == (full / "policy.ckpt").read_bytes()
    assert (model_dir / "history.csv").read_bytes() == (full / "history.csv").read_bytes()
    for name in ("trajectory.csv", "metrics.json", "trajectory.svg"):
        assert (ev / name).read_bytes() == (full / name).read_bytes()


def test_checkpoint_is_best_dev_epoch(tmp_path, small_cfg):
    assert _run("run-all", "--config", small_cfg, "--out", tmp_path) == 0
    ck = pol.load_checkpoint(tmp_path / "policy.ckpt")
    hist = load_history(tmp_path / "history.csv")
    assert ck.meta["epoch"] == hist.best_epoch
    assert ck.meta["dev_loss"] == hist.records[hist.best_epoch - 1].dev_loss


def test_seed_precedence(tmp_path, small_cfg, monkeypatch):
    def seed_of(d):
        return json.loads((d / "data_meta.json").read_text())["seed"]

    assert _run("gen-data", "--config", small_cfg, "--out", tmp_path / "cfg") == 0
    monkeypatch.setenv("NCGMM_SEED", "7")
    assert _run("gen-data", "--config", small_cfg, "--out", tmp_path / "env") == 0
    assert _run("gen-data", "--config", small_cfg, "--out", tmp_path / "flag", "--seed", "5") == 0
    assert _run("gen-data", "--config", small_cfg, "--out", tmp_path / "flag7", "--seed", "7") == 0
    assert [seed_of(tmp_path / n) for n in ("cfg", "env", "flag")] == [1, 7, 5]
    assert (tmp_path / "env" / "train.csv").read_bytes() == (tmp_path / "flag7" / "train.csv").read_bytes()
    monkeypatch.setenv("NCGMM_SEED", "abc")
    assert _run("gen-data", "--config", small_cfg, "--out", tmp_path / "bad") == 2


def test_default_config_gen_data(tmp_path):
    assert _run("gen-data", "--out", tmp_path) == 0
    meta = json.loads((tmp_path / "data_meta.json").read_text())
    assert (meta["n_train"], meta["n_dev"], meta["N"], meta["seed"]) == (2000, 200, 100, 0)


def test_eval_flags_and_multi_scenario(tmp_path, small_cfg):
    assert _run("run-all", "--config", small_cfg, "--out", tmp_path / "r") == 0
    ck = tmp_path / "r" / "policy.ckpt"
    assert _run("eval", "--config", small_cfg, "--checkpoint", ck, "--out", tmp_path / "e",
                "--steps", 40, "--scenarios", 3, "--transient", 5) == 0
    m = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert m["steps"] == 120 and m["scenarios"] == 3 and len(m["per_run_time_in_band"]) == 3
    assert m["control_bound_fraction"] == 1.0
    # steps shorter than the transient: everything is scored
    assert _run("eval", "--config", small_cfg, "--checkpoint", ck, "--out", tmp_path / "s", "--steps", 1) == 0
    assert json.loads((tmp_path / "s" / "metrics.json").read_text())["transient"] == 0


# -- exit codes ------------------------------------------------------------------

def test_usage_errors_exit_2(tmp_path, small_cfg, capsys):
    with pytest.raises(SystemExit) as e:
        _run("train", "--out", tmp_path)  # --data missing
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        _run("frobnicate")
    assert e.value.code == 2
    assert _run("gen-data", "--config", tmp_path / "missing.toml", "--out", tmp_path / "x") == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[trainer]\nlr = -1.0\n")
    assert _run("gen-data", "--config", bad, "--out", tmp_path / "x") == 2
    assert "trainer.lr" in capsys.readouterr().err
    assert _run("run-all", "--config", small_cfg, "--out", tmp_path / "x", "--threads", 0) == 2
    assert _run("gen-data", "--config", small_cfg, "--out", tmp_path / "x", "--seed", -3) == 2


def test_bad_checkpoint_exit_2(tmp_path, small_cfg):
    ck = tmp_path / "junk.ckpt"
    ck.write_bytes(b"not a checkpoint")
    assert _run("eval", "--config", small_cfg, "--checkpoint", ck, "--out", tmp_path / "e") == 2
    assert not (tmp_path / "e" / "metrics.txt").exists()
    # hidden width differs from the config
    pol.save(pol.init_policy(0, 4, hidden=8), ck)
    assert _run("eval", "--config", small_cfg, "--checkpoint", ck, "--out", tmp_path / "e") == 2
    # control bounds differ from the plant
    pol.save(pol.init_policy(0, 4, hidden=4, u_min=(0.0,), u_max=(9.0,)), ck)
    assert _run("eval", "--config", small_cfg, "--checkpoint", ck, "--out", tmp_path / "e") == 2


def test_missing_data_exit_3(tmp_path, small_cfg):
    assert _run("train", "--config", small_cfg, "--data", tmp_path / "nowhere", "--out", tmp_path / "o") == 3
    d = tmp_path / "d"
    assert _run("gen-data", "--config", small_cfg, "--out", d) == 0
    (d / "dev.csv").write_text("# ncgmm-dataset v1\ngarbage\n")
    assert _run("train", "--config", small_cfg, "--data", d, "--out", tmp_path / "o") == 3


def test_dimension_mismatch_exit_2(tmp_path, small_cfg):
    d = tmp_path / "d"
    assert _run("gen-data", "--config", small_cfg, "--out", d) == 0
    two = tmp_path / "two.toml"
    two.write_text(SMALL + "[plant]\nA = [[0.9, 0.0], [0.0, 0.9]]\nB = [[-0.5], [0.0]]\n"
                   "C = [[1.0, 0.0]]\nE = [[0.3], [0.0]]\n")
    assert _run("train", "--config", two, "--data", d, "--out", tmp_path / "o") == 2


def test_numerical_failure_exit_4(tmp_path, small_cfg):
    cfg = tmp_path / "blowup.toml"
    cfg.write_text(SMALL + "[plant]\nA = [[1e200]]\n")
    assert _run("run-all", "--config", cfg, "--out", tmp_path / "o") == 4


@pytest.mark.parametrize("cmd", ["gen-data", "train", "eval", "run-all"])
def test_subcommand_help(cmd, capsys):
    with pytest.raises(SystemExit) as e:
        _run(cmd, "--help")
    assert e.value.code == 0
    out = capsys.readouterr().out
    assert "--out" in out and "--config" in out
    if cmd in ("train", "run-all"):
        assert "--threads" in out


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "ncgmm", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-data" in r.stdout and "run-all" in r.stdout
