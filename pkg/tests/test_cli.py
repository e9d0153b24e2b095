import json

import numpy as np
import pytest

from aplmerge import bench
from aplmerge.cli import execute
from aplmerge.importance import ImportanceReport
from aplmerge.store import load_checkpoint


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "net.json").write_text(json.dumps({"input_dim": 16, "class_count": 4, "hidden_dims": [8, 8]}))
    assert execute(["toy-make-tasks", "--count", "2", "--out", "data", "--seed", "1"]) == 0
    assert execute(["toy-train", "--net-spec", "net.json", "--out", "base.st", "--schema-out", "schema.json"]) == 0
    for i in (0, 1):
        assert execute(["toy-train", "--net-spec", "net.json", "--base", "base.st", "--data",
                        f"data/task{i}.train.json", "--epochs", "30", "--out", f"f{i}.st"]) == 0
    return tmp_path


def test_delta(workdir):
    assert execute(["delta", "--base", "base.st", "--fine", "f0.st", "--out", "d.st"]) == 0
    d, b, f = (load_checkpoint(p) for p in ("d.st", "base.st", "f0.st"))
    for k in d:
        assert np.array_equal(d[k], (f[k].astype(np.float64) - b[k]).astype(np.float32))


def test_trace_grad_calibrate_prune(workdir):
    common = ["--base", "base.st", "--fine", "f0.st", "--batch", "data/task0.fewshot.json", "--net-spec", "net.json",
              "--schema", "schema.json"]
    assert execute(["trace", *common, "--out", "t.json", "--threads", "2"]) == 0
    assert execute(["grad", *common, "--out", "g.json"]) == 0
    t, g = ImportanceReport.load("t.json"), ImportanceReport.load("g.json")
    assert t.provider == "causal" and g.provider == "gradient"
    assert [e.id for e in t.entries] == [e.id for e in g.entries] == ["layer1", "layer2", "layer3"]
    assert execute(["calibrate", "--importance", "g.json", "--mode", "linear", "--ratio", "0.5",
                    "--epsilon", "0.1", "--out", "r.json"]) == 0
    assert sorted(json.loads(open("r.json").read())["ratios"].values()) == pytest.approx([0.4, 0.5, 0.6])
    assert execute(["prune", "--base", "base.st", "--fine", "f0.st", "--method", "apl-tanh", "--importance",
                    "t.json", "--schema", "schema.json", "--out", "p.st"]) == 0
    assert load_checkpoint("p.st").shapes == load_checkpoint("f0.st").shapes


def test_calibrate_weights(workdir):
    for i in (0, 1):
        assert execute(["trace", "--base", "base.st", "--fine", f"f{i}.st", "--batch", f"data/task{i}.fewshot.json",
                        "--net-spec", "net.json", "--level", "model", "--out", f"m{i}.json"]) == 0
    assert execute(["calibrate", "--mode", "weights", "--importance", "m0.json", "--importance", "m1.json",
                    "--out", "w.json"]) == 0
    w = json.loads(open("w.json").read())["weights"]
    assert set(w) == {"task0", "task1"} and sum(w.values()) == pytest.approx(1.0, abs=1e-12)


def test_merge_and_report(workdir, capsys):
    recipe = {"base": "base.st", "schema": "schema.json", "net_spec": "net.json", "provider": "causal",
              "tasks": [{"task_id": f"task{i}", "fine": f"f{i}.st", "batch": f"data/task{i}.fewshot.json"}
                        for i in (0, 1)]}
    open("recipe.json", "w").write(json.dumps(recipe))
    assert execute(["merge", "--recipe", "recipe.json", "--out", "m1.st"]) == 0
    assert execute(["merge", "--recipe", "recipe.json", "--out", "m2.st", "--threads", "4"]) == 0
    assert open("m1.st", "rb").read() == open("m2.st", "rb").read()
    run = json.loads(open("m1.st.report.json").read())
    assert run["version"] == 1 and len(run["tasks"]) == 2
    assert execute(["merge", "--recipe", "recipe.json", "--out", "m3.st", "--provider", "grad"]) == 0
    assert execute(["report", "--run", "m1.st.report.json"]) == 0
    assert "task1" in capsys.readouterr().out


def test_exit_codes(workdir, capsys):
    assert execute([]) == 1
    assert execute(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err
    assert execute(["delta", "--base", "base.st"]) == 1
    assert execute(["merge", "--recipe", "missing.file", "--out", "x.st"]) == 3
    err = capsys.readouterr().err
    assert "missing.file" in err and "[merge]" in err
    assert not (workdir / "x.st").exists()
    assert execute(["prune", "--base", "base.st", "--fine", "f0.st", "--ratio", "1.5", "--out", "x.st"]) == 2
    assert execute(["calibrate", "--importance", "nothing.json", "--ratio", "0.99", "--epsilon", "0.05",
                    "--out", "x.json"]) == 2
    assert execute(["delta", "--base", "base.st", "--fine", "nothing.st", "--out", "x.st"]) == 3
    open("bad.st", "wb").write(b"\x01")
    assert execute(["delta", "--base", "base.st", "--fine", "bad.st", "--out", "x.st"]) == 2
    open("bad_recipe.json", "w").write(json.dumps({"base": "base.st", "tasks": []}))
    assert execute(["merge", "--recipe", "bad_recipe.json", "--out", "x.st"]) == 2
    assert not (workdir / "x.st").exists()


def test_flags_validated_before_files(workdir):
    # the bad ratio is reported even though the input files do not exist
    assert execute(["prune", "--base", "nope.st", "--fine", "nope.st", "--ratio", "2", "--out", "x.st"]) == 2


def test_failed_merge_writes_nothing(workdir):
    recipe = {"base": "base.st", "schema": "missing_schema.json", "net_spec": "net.json", "provider": "causal",
              "tasks": [{"task_id": "task0", "fine": "f0.st", "batch": "data/task0.fewshot.json"}]}
    open("recipe.json", "w").write(json.dumps(recipe))
    assert execute(["merge", "--recipe", "recipe.json", "--out", "out.st"]) == 3
    assert not (workdir / "out.st").exists() and not (workdir / "out.st.report.json").exists()


def test_bench_csv_shape(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert execute(["bench", "--tasks", "2", "--ratios", "0.9,0.99", "--seeds", "2", "--preset", "small",
                    "--csv", "b.csv"]) == 0
    rows = bench.read_csv(open("b.csv").read())
    assert len(rows) == 2 * 2 * 2 * 3
    assert {r["method"] for r in rows} == set(bench.BENCH_METHODS)
    assert all(r["version"] == bench.CSV_VERSION for r in rows)
    assert execute(["report", "--csv", "b.csv", "--out", "summary.txt"]) == 0
    assert "apl-linear" in open("summary.txt").read()
    assert execute(["bench", "--ratios", "1.2", "--csv", "c.csv"]) == 2


def test_log_env(workdir, monkeypatch, capsys):
    monkeypatch.setenv("APL_LOG", "info")
    recipe = {"base": "base.st", "schema": "schema.json", "net_spec": "net.json", "provider": "gradient",
              "tasks": [{"task_id": "task0", "fine": "f0.st", "batch": "data/task0.fewshot.json"}]}
    open("r.json", "w").write(json.dumps(recipe))
    assert execute(["merge", "--recipe", "r.json", "--out", "m.st"]) == 0
    assert "importance for task0" in capsys.readouterr().err
    monkeypatch.setenv("APL_LOG", "error")
    assert execute(["merge", "--recipe", "r.json", "--out", "m.st"]) == 0
    assert capsys.readouterr().err == ""
