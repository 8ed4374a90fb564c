import json

import pytest

from mpda import cli, gradcheck, training
from mpda.feature_core import read_fmap, read_pgm

from conftest import TINY


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = "".join(f"{k} = {v}\n" for k, v in TINY.items())
    (d / "tiny.cfg").write_text("# tiny run\n" + cfg)
    assert cli.main(["gen", "--seed", "1", "--count", "2", "--out", str(d / "scenes")]) == 0
    assert cli.main(["train", "--config", str(d / "tiny.cfg"), "--out", str(d / "m.mpck"), "--report", str(d / "r.csv"), "--quiet"]) == 0
    return d


def test_gen_outputs(workdir):
    manifest = json.loads((workdir / "scenes" / "scenes.json").read_text())
    assert manifest["scenario"] == "hetero1" and len(manifest["scenes"]) == 2
    ego = read_fmap(workdir / "scenes" / "scene0000_ego.fmap")
    collab = read_fmap(workdir / "scenes" / "scene0000_collab.fmap")
    assert ego.shape == (1, 32, 88, 64)
    assert collab.shape[1:] == (16, 56, 128) and collab.agents == len(manifest["scenes"][0]["visibility"]) - 1


def test_train_report(workdir):
    lines = (workdir / "r.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,lr,L,L_det,L_domain,domain_acc" and len(lines) > 1


def test_eval_kv(workdir, capsys):
    assert cli.main(["eval", "--ckpt", str(workdir / "m.mpck"), "--scenario", "hetero1", "--seed", "4", "--scenes", "2", "--format", "kv"]) == 0
    out = capsys.readouterr().out
    assert "hetero1.mpda.ap_at_050 = " in out and "hetero1.no_fusion.num_gt = " in out


def test_adapt_then_viz(workdir, capsys):
    scenes = workdir / "scenes"
    out = workdir / "adapted.fmap"
    code = cli.main(
        ["adapt", "--in", str(scenes / "scene0000_collab.fmap"), "--ego", str(scenes / "scene0000_ego.fmap"),
         "--ckpt", str(workdir / "m.mpck"), "--out", str(out)]
    )
    assert code == 0
    adapted = read_fmap(out)
    assert adapted.shape[1:] == (32, 88, 64)
    assert cli.main(["viz", "--in", str(out), "--out", str(workdir / "a.pgm")]) == 0
    paths = capsys.readouterr().out.split()
    assert paths and read_pgm(paths[-1]).shape == (32, 88)


def test_bench(workdir, capsys):
    assert cli.main(["bench", "--ckpt", str(workdir / "m.mpck"), "--agents", "1,2", "--iters", "1", "--warmup", "0"]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 3


def test_validation_errors_exit_1(workdir, tmp_path):
    (tmp_path / "bad.cfg").write_text("nonsense = 3\n")
    assert cli.main(["train", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "x")]) == 1
    assert cli.main(["viz", "--in", str(tmp_path / "missing.fmap"), "--out", str(tmp_path / "x.pgm")]) == 1
    (tmp_path / "junk.fmap").write_bytes(b"JUNKJUNK")
    assert cli.main(["viz", "--in", str(tmp_path / "junk.fmap"), "--out", str(tmp_path / "x.pgm")]) == 1
    assert cli.main(["bench", "--ckpt", str(workdir / "m.mpck"), "--iters", "0"]) == 1
    assert cli.main(["bench", "--ckpt", str(workdir / "m.mpck"), "--agents", "0"]) == 1
    assert cli.main(["eval", "--ckpt", str(workdir / "m.mpck"), "--scenario", "mars"]) == 1
    assert cli.main(["frobnicate"]) == 1


def test_divergence_exit_2(workdir, monkeypatch):
    def diverge(cfg, progress=False):
        raise training.DivergenceError("non-finite loss")

    monkeypatch.setattr(training, "train", diverge)
    assert cli.main(["train", "--config", str(workdir / "tiny.cfg"), "--out", str(workdir / "never.mpck")]) == 2


def test_gradcheck_exit_codes(monkeypatch, capsys):
    ok = gradcheck.GradCheck("x", 1e-9, 1e-3, 1, 0.0)
    bad = gradcheck.GradCheck("y", 1.0, 1e-3, 1, 0.0)
    monkeypatch.setattr(gradcheck, "run_suite", lambda seed=0: [ok])
    assert cli.main(["gradcheck"]) == 0
    monkeypatch.setattr(gradcheck, "run_suite", lambda seed=0: [ok, bad])
    assert cli.main(["gradcheck"]) == 2
    assert "FAIL y" in capsys.readouterr().out


def test_help_exits_0():
    assert cli.main(["--help"]) == 0
