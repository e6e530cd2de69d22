import json
import os
import subprocess
import sys

import pytest

from stainalign.cli import main, read_config


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "emb", "--n", 20, "--dim", 16, "--seed", 3) == 0
    return root


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "stainalign", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "tile" in out.stdout


def test_usage_errors(capsys):
    assert run("bogus") == 1
    assert run("train") == 1
    assert run("train", "--manifest", "m.csv", "--out", "x", "--lr", "-1") == 1
    assert run("--config", "/nonexistent/cfg", "synth", "--out", "x") == 1


def test_data_errors(tmp_path, capsys):
    assert run("train", "--manifest", tmp_path / "none.csv", "--out", tmp_path / "c.hsae") == 2
    (tmp_path / "bad.hsae").write_bytes(b"XXXXXXXXXXXX")
    (tmp_path / "m.csv").write_text(
        "slide_id,patient_id,he_path,ihc_path,label,task\na,a,bad.hsae,,,\nb,b,bad.hsae,,,\n"
    )
    assert run("train", "--manifest", tmp_path / "m.csv", "--mode", "finetune", "--out", tmp_path / "c.hsae") == 2
    assert "bad.hsae" in capsys.readouterr().err


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    from stainalign import trainer
    from stainalign.errors import NumericalError

    def boom(*a, **k):
        raise NumericalError("non-finite l_inter at epoch 1")

    monkeypatch.setattr(trainer, "fit", boom)
    run("synth", "--out", tmp_path, "--n", 4, "--dim", 4)
    assert run("train", "--manifest", tmp_path / "manifest.csv", "--out", tmp_path / "c.hsae") == 3


def test_config_file(tmp_path, data):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# overrides\nepochs = 2\nlr=0.05\n")
    assert read_config(cfg) == {"epochs": "2", "lr": "0.05"}
    out = tmp_path / "c.hsae"
    assert run("--config", cfg, "train", "--manifest", data / "emb" / "manifest.csv", "--dim", 16, "--out", out) == 0
    hist = (tmp_path / "c.history.csv").read_text().splitlines()
    assert hist[0] == "epoch,l_inter,l_intra,l_class,l_total" and len(hist) == 3


def test_train_is_bit_reproducible(tmp_path, data):
    outs = []
    for i in range(2):
        out = tmp_path / f"c{i}.hsae"
        args = ["train", "--manifest", data / "emb" / "manifest.csv", "--dim", 16, "--epochs", 3, "--seed", 9, "--out", out]
        assert run(*args) == 0
        outs.append((out.read_bytes(), (tmp_path / f"c{i}.history.csv").read_bytes()))
    assert outs[0] == outs[1]


def test_eval_and_align_reports(tmp_path, data, capsys):
    man = data / "emb" / "manifest.csv"
    rep = tmp_path / "report.json"
    args = ["eval", "--manifest", man, "--dim", 16, "--epochs", 2, "--bootstrap", 50, "--out", rep, "--compare", "base"]
    assert run(*args) == 0
    printed = capsys.readouterr().out
    assert "pred 0" in printed and "true 1" in printed
    report = json.loads(rep.read_text())
    assert report["mode"] == "full" and len(report["predictions"]) == 20
    assert set(report["pooled"]["ci"]) == {"auc", "f1", "precision", "recall"}
    assert "tp_wilcoxon_p" in report["comparison"] and "alignment_wilcoxon_p" in report["comparison"]

    ckpt = tmp_path / "c.hsae"
    assert run("train", "--manifest", man, "--dim", 16, "--epochs", 2, "--out", ckpt) == 0
    align = tmp_path / "align.json"
    assert run("align", "--ckpt", ckpt, "--manifest", man, "--dim", 16, "--bootstrap", 50, "--out", align,
               "--baseline-ckpt", ckpt) == 0
    a = json.loads(align.read_text())
    assert a["n"] == 20 and a["wilcoxon_p"] == 1.0
    assert abs(a["difference_mean"] - (a["paired_mean"] - a["shuffled_mean"])) < 1e-12


def test_image_pipeline(tmp_path):
    assert run("synth", "--kind", "images", "--n", 4, "--size", 512, "--out", tmp_path / "img") == 0
    he = tmp_path / "img" / "s000_he.png"
    assert run("tile", "--input", he, "--stain", "he", "--out", tmp_path / "t", "--patch-size", 224,
               "--min-coverage", 0.2, "--downsample", 32) == 0
    names = sorted(os.listdir(tmp_path / "t" / "tiles"))
    assert names and all(n.startswith("x") and n.endswith(".png") for n in names)
    assert (tmp_path / "t" / "mask.pgm").read_bytes().startswith(b"P5\n16 16\n255\n")
    for i in range(2):
        assert run("embed", "--tiles", tmp_path / "t", "--out", tmp_path / f"e{i}.hsae", "--dim", 64, "--seed", 42) == 0
    assert (tmp_path / "e0.hsae").read_bytes() == (tmp_path / "e1.hsae").read_bytes()
    # image manifests are tiled and encoded on the fly
    assert run("train", "--manifest", tmp_path / "img" / "manifest.csv", "--mode", "ssl", "--epochs", 1,
               "--out", tmp_path / "c.hsae") == 0
