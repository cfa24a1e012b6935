import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from ddifuse.cli import main
from ddifuse.features import load_embedding_table
from ddifuse.graph import load_split

WORLD_INI = "[world]\nnum_drugs = 200\nedge_threshold = 8.0\nalt_feature_dim = 8\n"
TRAIN_INI = ("[teacher]\ndim = 8\nepochs = 5\nbatch_size = 128\nlr = 0.01\n"
             "[student]\nepochs = 5\nbatch_size = 64\nhidden = 32\n")


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "world.ini").write_text(WORLD_INI)
    (d / "train.ini").write_text(TRAIN_INI)
    assert run("gen", "--spec", d / "world.ini", "--out", d / "world") == 0
    assert run("split", "--triples", d / "world" / "triples.tsv", "--seed", 0, "--out", d / "split") == 0
    assert run("pools", "--split", d / "split", "--out", d / "pools") == 0
    assert run("train-teacher", "--split", d / "split", "--feat", d / "world" / "features.txt",
               "--config", d / "train.ini", "--out", d / "teacher") == 0
    assert run("distill", "--teacher", d / "teacher", "--split", d / "split", "--pools", d / "pools",
               "--feat", d / "world" / "features.txt", "--config", d / "train.ini", "--out", d / "student") == 0
    assert run("train-baseline", "--kind", "feature_mlp", "--split", d / "split", "--pools", d / "pools",
               "--feat", d / "world" / "features.txt", "--config", d / "train.ini", "--out", d / "mlp") == 0
    return d


def test_pipeline_artifacts(workdir):
    d = workdir
    assert (d / "world" / "world.json").exists() and (d / "world" / "alt_features.txt").exists()
    assert {p.name for p in (d / "pools").glob("*.manifest.json")} == {
        "train.manifest.json", "valid.manifest.json", "test.manifest.json"}
    for m in ("teacher", "student", "mlp"):
        assert (d / m / "manifest.json").exists()


def test_calibrate_eval_report_compare_plot(workdir, capsys):
    d, feat = workdir, workdir / "world" / "features.txt"
    common = ["--split", d / "split", "--pools", d / "pools", "--feat", feat]
    for m in ("teacher", "student", "mlp"):
        assert run("calibrate", "--model", d / m, *common, "--out", d / f"{m}.th.json") == 0
        assert run("eval", "--model", d / m, *common, "--threshold", d / f"{m}.th.json",
                   "--scores", d / f"{m}.scores.tsv", "--bootstrap", 200, "--out", d / f"{m}.json") == 0
    th = json.loads((d / "teacher.th.json").read_text())
    rep = json.loads((d / "teacher.json").read_text())
    assert rep["threshold"] == th["theta_star"] and rep["model"] == "teacher"
    assert json.loads((d / "mlp.json").read_text())["model"] == "feature_mlp"

    capsys.readouterr()
    assert run("report", d / "teacher.json", d / "student.json", "--out", d / "table.txt",
               "--kv", d / "table.kv") == 0
    assert "teacher" in capsys.readouterr().out and "teacher.roc_auc=" in (d / "table.kv").read_text()
    assert run("compare", d / "teacher.json", d / "mlp.json", "--fp", "teacher:feature_mlp") == 0
    assert "relative FP reduction teacher vs feature_mlp" in capsys.readouterr().out
    assert run("plot", d / "teacher.scores.tsv", d / "student.scores.tsv", "--out", d / "curves.png") == 0
    assert (d / "curves.png").read_bytes()[:4] == b"\x89PNG"


def test_binary_head_detector_flag(workdir):
    d, feat = workdir, workdir / "world" / "features.txt"
    common = ["--model", d / "student", "--split", d / "split", "--pools", d / "pools", "--feat", feat,
              "--detector", "binary_head"]
    assert run("calibrate", *common, "--out", d / "bh.th.json") == 0
    assert run("eval", *common, "--threshold", d / "bh.th.json", "--bootstrap", 200, "--out", d / "bh.json") == 0
    rep = json.loads((d / "bh.json").read_text())
    assert rep["threshold"] == json.loads((d / "bh.th.json").read_text())["theta_star"]


def test_eval_is_deterministic(workdir):
    d, feat = workdir, workdir / "world" / "features.txt"
    args = ["--model", d / "student", "--split", d / "split", "--pools", d / "pools", "--feat", feat,
            "--bootstrap", 200]
    assert run("eval", *args, "--out", d / "a.json") == 0
    assert run("eval", *args, "--out", d / "b.json") == 0
    assert (d / "a.json").read_bytes() == (d / "b.json").read_bytes()


def test_tampered_split_exits_3(workdir, tmp_path, capsys):
    d = workdir
    shutil.copytree(d / "split", tmp_path / "split")
    test_line = next(l for l in (tmp_path / "split" / "test.tsv").read_text().splitlines()
                     if not l.startswith("#"))
    with open(tmp_path / "split" / "train.tsv", "a") as fh:
        fh.write(test_line + "\n")
    code = run("distill", "--teacher", d / "teacher", "--split", tmp_path / "split",
               "--feat", d / "world" / "features.txt", "--out", tmp_path / "s")
    assert code == 3
    assert "leak" in capsys.readouterr().err.lower()


def test_tampered_pool_exits_4(workdir, tmp_path, capsys):
    d = workdir
    shutil.copytree(d / "pools", tmp_path / "pools")
    f = tmp_path / "pools" / "test.tsv"
    lines = f.read_text().splitlines()
    f.write_text("\n".join(lines[:-1]) + "\n")  # drop one negative
    code = run("eval", "--model", d / "teacher", "--split", d / "split", "--pools", tmp_path / "pools",
               "--feat", d / "world" / "features.txt", "--out", tmp_path / "r.json")
    assert code == 4
    assert "test" in capsys.readouterr().err
    assert not (tmp_path / "r.json").exists()


def test_config_errors_exit_2(tmp_path, capsys):
    assert run("run", "--config", tmp_path / "missing.ini") == 2
    (tmp_path / "bad.ini").write_text("[student]\nalpha = 2\n")
    assert run("run", "--config", tmp_path / "bad.ini") == 2
    assert "alpha" in capsys.readouterr().err


def test_run_subcommand_and_entry_point(tmp_path):
    ini = tmp_path / "exp.ini"
    ini.write_text(WORLD_INI.replace("alt_feature_dim = 8\n", "") + TRAIN_INI
                   + "[eval]\nbootstrap_iterations = 200\nmodels = teacher, student\n")
    proc = subprocess.run([sys.executable, "-m", "ddifuse", "run", "--config", ini, "--seed", "1",
                           "--out", tmp_path / "out"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "student" in proc.stdout
    assert json.loads((tmp_path / "out" / "run.json").read_text())["seeds"] == [1]


def test_split_merge_inverse_and_frozen_entities(workdir, tmp_path):
    d = workdir
    triples = tmp_path / "t.tsv"
    lines = (d / "world" / "triples.tsv").read_text().splitlines()
    first = next(l for l in lines if not l.startswith("#")).split("\t")
    triples.write_text("\n".join(lines + ["\t".join(first[::-1])]) + "\n")
    assert run("split", "--triples", triples, "--out", tmp_path / "s1") == 0
    assert run("split", "--triples", triples, "--merge-inverse", "--out", tmp_path / "s2") == 0
    assert run("split", "--triples", triples, "--symmetric", "--out", tmp_path / "s3") == 0
    assert (tmp_path / "s2" / "train.tsv").read_bytes() == (tmp_path / "s3" / "train.tsv").read_bytes()
    sizes = [len(load_split(tmp_path / s).all_edges()) for s in ("s1", "s2")]
    assert sizes[0] == sizes[1] + 1

    feat, kge = d / "world" / "features.txt", d / "world" / "kg_emb.txt"
    assert run("train-teacher", "--split", d / "split", "--feat", feat, "--freeze-entities",
               "--out", tmp_path / "x") == 2
    assert run("train-teacher", "--split", d / "split", "--feat", feat, "--kg-emb", kge, "--freeze-entities",
               "--config", d / "train.ini", "--out", tmp_path / "frozen") == 0
    emb = np.load(tmp_path / "frozen" / "params.npz")["entity_emb"]
    plan = load_split(d / "split")
    table = load_embedding_table(kge)
    assert np.array_equal(emb[plan.train_nodes], table.matrix[plan.train_nodes])
