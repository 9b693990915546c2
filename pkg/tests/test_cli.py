import json
import subprocess
import sys

import numpy as np
import pytest

from afif4.cli import main
from afif4.imagecore import ImageBuffer, load_image, parse_manifest, save_image
from afif4.synthetic import face_landmarks


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert run("synth", "--out", out, "--n", 40, "--size", 48) == 0
    return out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "afif4", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "crossval" in proc.stdout


def test_synth_writes_named_manifest(dataset):
    m = parse_manifest(dataset / "manifest.tsv")
    assert len(m) == 40 and m.name == "synthetic"
    assert all(r.landmarks is not None for r in m.records)


def test_folds(dataset, tmp_path):
    out = tmp_path / "folded.tsv"
    assert run("folds", "--manifest", dataset / "manifest.tsv", "--out", out, "--k", 4) == 0
    m = parse_manifest(out)
    assert sorted({r.fold for r in m.records}) == [0, 1, 2, 3]


def test_metrics(capsys):
    assert run("metrics", "--recall", 92.40, "--precision", 93.00) == 0
    assert "92.70" in capsys.readouterr().out
    assert run("metrics", "--tp", 10, "--fp", 0, "--fn", 0) == 0
    assert "100.00" in capsys.readouterr().out


def test_ssr_and_degrade(tmp_path):
    src = tmp_path / "in.png"
    save_image(ImageBuffer(np.random.default_rng(0).random((16, 16, 3))), src)
    assert run("ssr", "--in", src, "--out", tmp_path / "ssr.png") == 0
    assert load_image(tmp_path / "ssr.png").shape == (16, 16, 3)
    assert run("degrade", "--in", src, "--out", tmp_path / "d.png",
               "--kind", "posterize", "--difficulty", "hard") == 0
    assert len(np.unique(load_image(tmp_path / "d.png").pixels[:, :, 0])) <= 4


def test_foggy(tmp_path):
    src = tmp_path / "face.png"
    save_image(ImageBuffer(np.random.default_rng(1).random((40, 40, 3))), src)
    lm = tmp_path / "lm.txt"
    lm.write_text(" ".join(f"{v:.3f}" for v in face_landmarks(20, 20, 9, 11).points.ravel()))
    assert run("foggy", "--in", src, "--landmarks", lm, "--out", tmp_path / "fog.png",
               "--method", "dense") == 0
    assert load_image(tmp_path / "fog.png").shape == (40, 40, 3)


def test_augment(tmp_path):
    src = tmp_path / "imgs"
    src.mkdir()
    save_image(ImageBuffer(np.random.default_rng(2).random((16, 16))), src / "a.png")
    assert run("augment", "--in", src, "--out", tmp_path / "aug") == 0
    assert len(list((tmp_path / "aug").glob("a_aug*.png"))) == 10


def test_gradcheck(capsys):
    assert run("gradcheck", "--fc-only") == 0
    assert "pass" in capsys.readouterr().out.lower()


def test_crossval_report_and_eval(dataset, tmp_path, capsys):
    cfg = tmp_path / "fast.cfg"
    cfg.write_text("iterations = 40\nboost_rounds = 5\nfolds = 2\n")
    rep = tmp_path / "rep.json"
    assert run("--config", cfg, "crossval", "--manifest", dataset / "manifest.tsv",
               "--report", rep, "--format", "json", "--bundles", tmp_path / "b") == 0
    data = json.loads(rep.read_text())
    assert len(data["fold_accuracies"]) == 2 and data["dataset"] == "synthetic"
    capsys.readouterr()
    assert run("eval", "--bundle", tmp_path / "b" / "fold0", "--manifest", dataset / "manifest.tsv") == 0
    assert "%" in capsys.readouterr().out
    assert run("report", "--in", rep, "--out", tmp_path / "rep.md") == 0
    assert "| Mean |" in (tmp_path / "rep.md").read_text()


def test_errors_exit_two(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense = 1\n")
    assert run("--config", bad, "metrics", "--recall", 1, "--precision", 1) == 2
    assert "error" in capsys.readouterr().err
    assert run("ssr", "--in", tmp_path / "missing.png", "--out", tmp_path / "o.png") == 2
