import json

import pytest

from ssnn.cli import run_cli


def run(*argv):
    return run_cli([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--kind", "ssnn", "--out", d / "d.csv", "--seed", 3,
               "--set", "ssnn.count=3", "--set", "ssnn.T=30", "--set", "ssnn.M=4", "--set", "ssnn.min_duration=2") == 0
    assert run("train", "--data", d / "d.csv", "--out", d / "run", "--seed", 1, "--set", "train.iterations=6",
               "--set", "train.M=4", "--set", "train.batch_size=2", "--set", "train.checkpoint_every=3") == 0
    return d


def test_gen_data_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--kind", "pendulum", "--seed", 7, "--out", tmp_path / f"{name}.csv",
                   "--set", "pendulum_set.count=2", "--set", "pendulum.duration=0.5") == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv.states.csv").read_bytes() == (tmp_path / "b.csv.states.csv").read_bytes()


def test_train_outputs(workdir):
    names = sorted(p.name for p in (workdir / "run").iterdir())
    assert names == ["history.jsonl", "model-000003.ckpt", "model-000006.ckpt", "model.ckpt"]
    assert len((workdir / "run" / "history.jsonl").read_text().splitlines()) == 6


def test_eval_report(workdir, capsys):
    assert run("eval", "--checkpoint", workdir / "run" / "model.ckpt", "--data", workdir / "d.csv",
               "--out", workdir / "rep.json", "--set", "eval.samples=5", "--require-truth") == 0
    rep = json.loads((workdir / "rep.json").read_text())
    assert rep["report_version"] == 1 and rep["aggregate"]["sequences"] == 3
    assert "error_mean" in capsys.readouterr().out


def test_oracle_and_sample(workdir):
    assert run("oracle", "--checkpoint", workdir / "run" / "model.ckpt", "--data", workdir / "d.csv",
               "--out", workdir / "o.json") == 0
    out = json.loads((workdir / "o.json").read_text())
    assert len(out["sequences"]) == 3 and len(out["sequences"][0]["map_z"]) == 30
    assert run("sample", "--checkpoint", workdir / "run" / "model.ckpt", "--out", workdir / "s.bin",
               "--format", "raw-f32", "--count", 2, "--T", 9) == 0


def test_eval_dimension_mismatch(workdir, tmp_path, capsys):
    assert run("gen-data", "--kind", "ssnn", "--out", tmp_path / "m3.csv", "--set", "ssnn.m=3",
               "--set", "ssnn.count=1", "--set", "ssnn.T=5") == 0
    code = run("eval", "--checkpoint", workdir / "run" / "model.ckpt", "--data", tmp_path / "m3.csv")
    assert code == 2 and "dim" in capsys.readouterr().err


def test_usage_errors(capsys):
    assert run() == 1
    assert run("train", "--bogus") == 1
    assert run("gen-data", "--kind", "ssnn", "--out", "x.csv", "--set", "ssnn.nope=1") == 1
    assert "valid keys" in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path):
    assert run("eval", "--checkpoint", tmp_path / "missing.ckpt", "--data", tmp_path / "none.csv") == 2


def test_gradcheck(capsys):
    assert run("gradcheck", "--T", 4, "--K", 2, "--M", 2) == 0
    assert "max rel. error" in capsys.readouterr().out
