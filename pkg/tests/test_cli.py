import json
from pathlib import Path

import pytest

from fhvae.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, dispatch
from fhvae.data import read_archive, read_manifest

TINY = ["--n-speakers", "2", "--n-utts-per-speaker", "3", "--n-dev-per-speaker", "1",
        "--n-test-per-speaker", "2", "--dim", "4", "--width", "5", "--min-frames", "10",
        "--max-frames", "20", "--n-classes", "3"]
NET = ["--width", "5", "--units", "6", "--dim-z1", "2", "--dim-z2", "2", "--dim-z-vae", "3",
       "--max-epochs", "2", "--batch-size", "8"]


@pytest.fixture
def data(tmp_path):
    out = tmp_path / "data"
    assert dispatch(["datagen", "--out", str(out), "--seed", "3"] + TINY) == EXIT_OK
    return out


def _tree(path):
    return {p.relative_to(path): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_datagen_is_byte_reproducible(tmp_path, data):
    again = tmp_path / "again"
    assert dispatch(["datagen", "--out", str(again), "--seed", "3"] + TINY) == EXIT_OK
    a, b = _tree(data), _tree(again)
    a.pop(Path("config.json"))
    cfg_b = json.loads(b.pop(Path("config.json")))
    assert a == b
    assert cfg_b["seed"] == 3 and cfg_b["command"] == "datagen"
    assert len(read_manifest(data / "train.tsv")) == 6


def test_unknown_subcommand_writes_nothing(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert dispatch(["frobnicate", "--out", "x"]) == EXIT_USAGE
    assert list(tmp_path.iterdir()) == []
    err = capsys.readouterr().err.strip()
    assert err.startswith("fhvae: usage error") and "\n" not in err


@pytest.mark.parametrize("argv", [
    [],
    ["train", "--lr", "-1"],
    ["train", "--seq-label", "room"],
    ["datagen", "--dim", "2"],
    ["sweep-alpha", "--alphas", "0,-3"],
    ["extract", "--feature", "z1"],
    ["eval-invariance", "--test", "clean"],
])
def test_usage_errors_before_writes(tmp_path, monkeypatch, argv):
    monkeypatch.chdir(tmp_path)
    assert dispatch(argv + ["--out", "o"] if argv else argv) == EXIT_USAGE
    assert list(tmp_path.iterdir()) == []


def test_config_file_merging(tmp_path, data, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "bad.json").write_text(json.dumps({"alpha": 1.0, "colour": "red"}))
    assert dispatch(["train", "--config", "bad.json", "--out", "o"]) == EXIT_USAGE
    assert not (tmp_path / "o").exists()
    (tmp_path / "c.json").write_text(json.dumps({"alpha": 1.0, "units": 9, "seed": 4}))
    argv = ["train", "--config", "c.json", "--train", str(data / "train.tsv"),
            "--dev", str(data / "dev.tsv"), "--out", "run"] + NET + ["--alpha", "2.5"]
    assert dispatch(argv) == EXIT_OK
    cfg = json.loads((tmp_path / "run" / "config.json").read_text())
    assert cfg["alpha"] == 2.5 and cfg["units"] == 6 and cfg["seed"] == 4


def test_train_extract_evaluate(tmp_path, data, capsys):
    run = tmp_path / "run"
    common = ["--train", str(data / "train.tsv"), "--dev", str(data / "dev.tsv")] + NET
    assert dispatch(["train", "--out", str(run), "--alpha", "10"] + common) == EXIT_OK
    assert {"model.ckpt", "train.jsonl", "train.png", "config.json"} <= {
        p.name for p in run.iterdir()}
    vae = tmp_path / "vae"
    assert dispatch(["train", "--mode", "vae", "--out", str(vae)] + common) == EXIT_OK

    feats = tmp_path / "feats"
    assert dispatch(["extract", "--checkpoint", str(run / "model.ckpt"), "--manifest",
                     str(data / "test_clean.tsv"), "--feature", "z1mu2",
                     "--out", str(feats)]) == EXIT_OK
    arch = read_archive(feats / "test_clean.z1mu2.farc")
    rows = read_manifest(data / "test_clean.tsv")
    src = read_archive(data / "test_clean.farc")
    assert list(arch) == [r["utt_id"] for r in rows]
    for uid, x in arch.items():
        assert x.shape == (len(src[uid]), 2 * 2 + 2)

    assert dispatch(["extract", "--checkpoint", str(vae / "model.ckpt"), "--manifest",
                     str(data / "test_clean.tsv"), "--feature", "z1"]) == EXIT_FAILURE
    assert capsys.readouterr().err.count("\n") == 1

    rep = tmp_path / "rep"
    assert dispatch(["eval-invariance", "--train", str(data / "train.tsv"),
                     "--test", f"clean={data / 'test_clean.tsv'}",
                     "--test", f"shifted={data / 'test_shifted.tsv'}",
                     "--checkpoint", str(run / "model.ckpt"), "--checkpoint", str(vae / "model.ckpt"),
                     "--out", str(rep)]) == EXIT_OK
    doc = json.loads((rep / "invariance.json").read_text())
    assert set(doc["errors"]) == {"raw", "z", "z1", "z1mu2"}
    assert (rep / "invariance.png").exists() and (rep / "invariance.tsv").exists()

    capsys.readouterr()
    assert dispatch(["eval-collapse", "--checkpoint", str(run / "model.ckpt"),
                     "--out", str(rep)]) == EXIT_OK
    spread = json.loads((rep / "collapse.json").read_text())["svector_spread"]
    assert capsys.readouterr().out == f"svector_spread\t{spread:.6f}\n"
    assert dispatch(["eval-collapse", "--checkpoint", str(vae / "model.ckpt")]) == EXIT_FAILURE


def test_sweep_alpha_uses_data_root(tmp_path, data, monkeypatch):
    monkeypatch.setenv("FHVAE_DATA_ROOT", str(data))
    out = tmp_path / "sweep"
    assert dispatch(["sweep-alpha", "--alphas", "0,10", "--out", str(out)] + NET) == EXIT_OK
    lines = (out / "sweep.tsv").read_text().splitlines()
    assert lines[0].split("\t")[0] == "alpha" and [ln.split("\t")[0] for ln in lines[1:]] == ["0", "10"]
    assert (out / "sweep.png").exists()


def test_training_is_reproducible_through_cli(tmp_path, data):
    common = ["--train", str(data / "train.tsv"), "--dev", str(data / "dev.tsv"), "--seed", "1"] + NET
    assert dispatch(["train", "--out", str(tmp_path / "a")] + common) == EXIT_OK
    assert dispatch(["train", "--out", str(tmp_path / "b")] + common) == EXIT_OK
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
