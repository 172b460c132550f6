import json
import subprocess
import sys

import pytest

from eegkd import cli, gradcheck
from eegkd.trainer import load_checkpoint


@pytest.fixture(autouse=True)
def in_tmp(tmp_path, monkeypatch):
    # commands without --out write their manifest to the working directory
    monkeypatch.chdir(tmp_path)


@pytest.fixture
def data(tmp_path):
    out = tmp_path / "data"
    argv = ["gen-synthetic", "--classes", "3", "--images-per-class", "6", "--timesteps", "12",
            "--channels", "3", "--noise", "0.3", "--out", str(out)]
    assert cli.main(argv) == 0
    return out


def train_argv(data, out, *extra):
    return ["train", "--corpus", str(data / "corpus.eegc"), "--posteriors", str(data / "posteriors.tsv"),
            "--hidden", "4", "--depth", "1", "--epochs", "2", "--batch", "4", "--out", str(out), *extra]


def test_gen_synthetic_is_byte_identical(tmp_path, data):
    again = tmp_path / "again"
    cli.main(["gen-synthetic", "--classes", "3", "--images-per-class", "6", "--timesteps", "12",
              "--channels", "3", "--noise", "0.3", "--out", str(again)])
    for name in ("corpus.eegc", "posteriors.tsv"):
        assert (again / name).read_bytes() == (data / name).read_bytes()
    manifest = json.loads((again / "gen-synthetic.manifest.json").read_text())
    assert manifest["results"]["samples"] == 18


def test_train_eval_extract(tmp_path, data, capsys):
    run = tmp_path / "run"
    assert cli.main(train_argv(data, run)) == 0
    out = capsys.readouterr().out
    assert "test accuracy" in out and "posterior reads" in out
    log = json.loads((run / "trainlog.json").read_text())
    assert len(log["epochs"]) == 2
    ck = str(run / "checkpoint.cgnt")
    assert cli.main(["eval", "--checkpoint", ck, "--corpus", str(data / "corpus.eegc")]) == 0
    assert "accuracy:" in capsys.readouterr().out
    feats = tmp_path / "f.tsv"
    assert cli.main(["extract", "--checkpoint", ck, "--corpus", str(data / "corpus.eegc"),
                     "--window", "6", "--stride", "3", "--out", str(feats)]) == 0
    # 12 steps, width 6, stride 3 -> 3 excerpts per sample
    assert len(feats.read_text().splitlines()) == 3 * 18


def test_unsupervised_reports_zero_label_reads(tmp_path, data, capsys):
    assert cli.main(train_argv(data, tmp_path / "u", "--mode", "unsupervised")) == 0
    assert "label reads: 0" in capsys.readouterr().out


def test_hard_mode_needs_no_posteriors(tmp_path, data):
    argv = ["train", "--mode", "hard", "--corpus", str(data / "corpus.eegc"), "--hidden", "4",
            "--depth", "1", "--epochs", "1", "--out", str(tmp_path / "h")]
    assert cli.main(argv) == 0


def test_resume_matches_uninterrupted(tmp_path, data):
    cli.main(train_argv(data, tmp_path / "full", "--epochs", "4"))
    cli.main(train_argv(data, tmp_path / "a", "--epochs", "2"))
    cli.main(train_argv(data, tmp_path / "b", "--epochs", "4", "--resume", str(tmp_path / "a" / "checkpoint.cgnt")))
    full = load_checkpoint(tmp_path / "full" / "checkpoint.cgnt")
    resumed = load_checkpoint(tmp_path / "b" / "checkpoint.cgnt")
    for k, v in full.stack.params.items():
        assert (resumed.stack.params[k] == v).all()


def test_replay_reproduces_outputs(tmp_path, data):
    run = tmp_path / "run"
    cli.main(train_argv(data, run))
    first = (run / "checkpoint.cgnt").read_bytes()
    (run / "checkpoint.cgnt").unlink()
    assert cli.main(["replay", str(run / "train.manifest.json")]) == 0
    assert (run / "checkpoint.cgnt").read_bytes() == first


def test_missing_posteriors_is_usage_error(tmp_path, data):
    argv = ["train", "--corpus", str(data / "corpus.eegc"), "--epochs", "1", "--out", str(tmp_path / "x")]
    assert cli.main(argv) == 2


@pytest.mark.parametrize("argv", [
    ["gen-synthetic", "--noise", "-1", "--out", "x"],
    ["train", "--corpus", "c", "--out", "o"],            # --epochs missing
    ["train", "--corpus", "c", "--epochs", "1", "--out", "o", "--depth", "7"],
    ["frobnicate"],
])
def test_bad_arguments_exit_2(argv):
    with pytest.raises(SystemExit) as e:
        cli.main(argv)
    assert e.value.code == 2


def test_missing_file_exits_1(tmp_path, data):
    argv = ["eval", "--checkpoint", str(tmp_path / "nope.cgnt"), "--corpus", str(data / "corpus.eegc")]
    assert cli.main(argv) == 1


def test_corrupt_corpus_exits_1(tmp_path, data):
    bad = tmp_path / "bad.eegc"
    bad.write_bytes(b"JUNKJUNKJUNK")
    assert cli.main(train_argv(data, tmp_path / "o")[:2] + [str(bad)] + train_argv(data, tmp_path / "o")[3:]) == 1


def test_gradcheck_command(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(cli, "run_suite", lambda seed: gradcheck.run_suite(seed, depths=(1,)))
    assert cli.main(["--manifest", str(tmp_path / "g.json"), "gradcheck"]) == 0
    assert "all gradients within" in capsys.readouterr().out


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "eegkd", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-synthetic" in r.stdout
