import json
from pathlib import Path

import pytest

from chemgnn.chemgraph import Dataset
from chemgnn.cli import main
from chemgnn.harness import sha256_file

TINY_TRAIN = {
    "schema": "chemgnn-train/1",
    "backbone": "schnet",
    "model": {"state_size": 6, "n_rbf": 6, "rbf_gamma": 1.0, "elements": ["Al", "Cu"],
              "relations": ["metallic", "no-bond"], "variant": "message"},
    "loss": {"tasks": ["atom-counts", "scaling-distribution"]},
    "optimizer": {"learning_rate": 0.01},
    "max_epochs": 3,
}


def run(capsys, *argv):
    status = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return status, out, err


def error_of(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def ucg(work, capsys):
    assert run(capsys, "gen", "--family", "ucg", "--seeds", 1, "--max-size", 17, "--size-stride", 2, "--out", "ucg.json")[0] == 0
    return work / "ucg.json"


def write(path, obj):
    Path(path).write_text(json.dumps(obj))
    return path


class TestGen:
    def test_byte_identical(self, work, capsys):
        for name in ("a.json", "b.json"):
            assert run(capsys, "gen", "--family", "pc", "--reps", "1,2", "--seed", 4, "--out", name)[0] == 0
        assert (work / "a.json").read_bytes() == (work / "b.json").read_bytes()
        m = json.loads((work / "a.json.manifest.json").read_text())
        assert m["outputs"]["a.json"] == sha256_file(work / "a.json")
        assert m["seed"] == 4 and m["config"]["reps"] == [1, 2] and m["tool_version"]

    def test_cg_cardinality(self, work, capsys):
        status, _, _ = run(capsys, "gen", "--family", "cg", "--seeds", 20, "--elements", "Al,Cu", "--out", "cg.json")
        assert status == 0
        assert len(Dataset.load(work / "cg.json")) == 4000

    def test_config_file_and_flags(self, work, capsys):
        write("gen.json", {"schema": "chemgnn-gen/1", "family": "pc", "reps": [1], "elements": ["Cu"]})
        assert run(capsys, "gen", "--config", "gen.json", "--out", "pc.json")[0] == 0
        ds = Dataset.load("pc.json")
        assert len(ds) == 13 and set(ds.systems[0].elements) == {"Cu"}
        m = json.loads(Path("pc.json.manifest.json").read_text())
        assert "gen.json" in m["inputs"]

    def test_unknown_config_key(self, work, capsys):
        write("gen.json", {"schema": "chemgnn-gen/1", "family": "pc", "colour": "red"})
        status, _, err = run(capsys, "gen", "--config", "gen.json", "--out", "x.json")
        assert status == 2 and error_of(err)["error"] == "usage"

    def test_wrong_schema(self, work, capsys):
        write("gen.json", {"schema": "chemgnn-gen/0", "family": "pc"})
        assert run(capsys, "gen", "--config", "gen.json", "--out", "x.json")[0] == 2
        write("gen.json", {"family": "pc"})
        assert run(capsys, "gen", "--config", "gen.json", "--out", "x.json")[0] == 2


class TestUsage:
    @pytest.mark.parametrize("argv", [[], ["frob"], ["gen", "--out"], ["gen", "--family", "xyz", "--out", "a"],
                                      ["train", "--config", "missing.json", "--out-dir", "r"],
                                      ["eval", "--checkpoint", "oracle", "--data", "missing.json", "--out-dir", "e"],
                                      ["gen", "--family", "pc", "--out", "a", "--bogus"]])
    def test_exit_two(self, work, capsys, argv):
        status, _, err = run(capsys, *argv)
        assert status == 2
        assert error_of(err)["error"] == "usage"

    def test_runtime_error_exit_one(self, ucg, capsys):
        status, _, err = run(capsys, "scan", "--checkpoint", "oracle", "--data", ucg, "--system-id", "nope", "--out", "s.csv")
        assert status == 1 and error_of(err)["error"] == "data"

    def test_bad_checkpoint(self, ucg, capsys):
        Path("ck.json").write_text('{"format": "something-else"}')
        status, _, err = run(capsys, "eval", "--checkpoint", "ck.json", "--data", ucg, "--out-dir", "e")
        assert status == 1 and error_of(err)["error"] == "data"

    def test_unknown_train_key(self, ucg, capsys):
        write("t.json", {**TINY_TRAIN, "epochs": 3})
        assert run(capsys, "train", "--config", "t.json", "--data", ucg, "--out-dir", "r")[0] == 2


class TestEval:
    def test_oracle_over_pc(self, work, capsys):
        run(capsys, "gen", "--family", "pc", "--out", "pc.json")
        status, out, _ = run(capsys, "eval", "--checkpoint", "oracle", "--data", "pc.json", "--out-dir", "ev")
        assert status == 0
        assert json.loads(out) == {"ae_mean": 0.0, "dsg_mean": 0.0}
        agg = json.loads((work / "ev" / "metrics.json").read_text())
        assert agg["ae"]["n"] == 78 and agg["dsg"]["n"] == 6


class TestTrainPipeline:
    def test_train_eval_scan_contrib(self, ucg, work, capsys):
        write("t.json", TINY_TRAIN)
        for d in ("r1", "r2"):
            assert run(capsys, "train", "--config", "t.json", "--data", ucg, "--out-dir", d, "--seed", 5)[0] == 0
        for f in ("checkpoint.json", "train_log.csv"):
            assert sha256_file(work / "r1" / f) == sha256_file(work / "r2" / f)
        m = json.loads((work / "r1" / "manifest.json").read_text())
        assert m["seed"] == 5 and m["config"]["seed"] == 5
        log = (work / "r1" / "train_log.csv").read_text().splitlines()
        assert log[0] == "epoch,loss_total,loss_energy,loss_atoms,loss_orbitals,loss_dsg,val_loss" and len(log) == 4

        for d in ("e1", "e2"):
            assert run(capsys, "eval", "--checkpoint", "r1/checkpoint.json", "--data", ucg, "--split", "test", "--out-dir", d)[0] == 0
        for f in ("metrics.json", "systems.csv", "geometries.csv"):
            assert (work / "e1" / f).read_bytes() == (work / "e2" / f).read_bytes()

        sid = Dataset.load(ucg).systems[0].system_id
        assert run(capsys, "scan", "--checkpoint", "r1/checkpoint.json", "--data", ucg, "--system-id", sid, "--out", "scan.csv")[0] == 0
        rows = (work / "scan.csv").read_text().splitlines()
        assert rows[0] == "scaling,predicted,energy" and len(rows) == 14

        assert run(capsys, "contrib", "--checkpoint", "r1/checkpoint.json", "--data", ucg, "--system-id", sid, "--out", "c.csv")[0] == 0
        rows = (work / "c.csv").read_text().splitlines()
        assert rows[0] == "displacement,energy,c_moving,c_static_mean" and len(rows) == 14
        assert run(capsys, "contrib", "--checkpoint", "r1/checkpoint.json", "--data", ucg, "--system-id", sid,
                   "--scenario", "per-atom", "--out", "p.csv")[0] == 0
        shares = [float(r.split(",")[3]) for r in (work / "p.csv").read_text().splitlines()[1:]]
        assert sum(shares) == pytest.approx(1.0, abs=1e-10)

    def test_replay(self, ucg, work, capsys):
        write("t.json", {**TINY_TRAIN, "max_epochs": 1})
        assert run(capsys, "train", "--config", "t.json", "--data", ucg, "--out-dir", "r")[0] == 0
        (work / "r" / "checkpoint.json").write_text("{}")
        status, out, _ = run(capsys, "replay", "r/manifest.json")
        assert status == 0 and json.loads(out)["outputs"] == 2
        original = Path(ucg).read_text()
        Path(ucg).write_text(original.replace('"seed":0', '"seed":1', 1))
        status, _, err = run(capsys, "replay", "r/manifest.json")
        assert status == 1 and "changed" in error_of(err)["message"]
        Path(ucg).write_text(original)
        write("t.json", {**TINY_TRAIN, "max_epochs": 2})
        assert run(capsys, "replay", "r/manifest.json")[0] == 1


class TestExperiments:
    def test_reduced(self, ucg, work, capsys):
        cfg = {"schema": "chemgnn-experiment/1", "variants": {"base": {**TINY_TRAIN, "model": {**TINY_TRAIN["model"], "variant": "none"}}},
               "schedule": [1.0, 0.25]}
        cfg["variants"]["base"].pop("schema")
        write("x.json", cfg)
        assert run(capsys, "experiment", "reduced", "--config", "x.json", "--data", ucg, "--out-dir", "x")[0] == 0
        rows = (work / "x" / "reduced.csv").read_text().splitlines()
        assert rows[0] == "variant,fraction,n_train,n_scalings,ae_mean,dsg_mean"
        assert [r.split(",")[3] for r in rows[1:]] == ["13", "4"]

    def test_size_gen_and_ablation(self, ucg, work, capsys):
        tr = {k: v for k, v in TINY_TRAIN.items() if k != "schema"}
        write("s.json", {"schema": "chemgnn-experiment/1", "variants": {"aug": tr}, "caps": [15, None]})
        assert run(capsys, "experiment", "size-gen", "--config", "s.json", "--data", ucg, "--out-dir", "s", "--seed", 2)[0] == 0
        assert len((work / "s" / "pearson.csv").read_text().splitlines()) == 3
        write("a.json", {"schema": "chemgnn-experiment/1", "full": {**tr, "max_epochs": 1}})
        assert run(capsys, "experiment", "ablation", "--config", "a.json", "--data", ucg, "--out-dir", "a")[0] == 0
        rows = (work / "a" / "ablation.csv").read_text().splitlines()
        assert len(rows) == 6 and rows[0].startswith("model,ae_all,dsg_all")

    def test_protocol_keys(self, ucg, work, capsys):
        write("a.json", {"schema": "chemgnn-experiment/1", "variants": {}})
        assert run(capsys, "experiment", "ablation", "--config", "a.json", "--data", ucg, "--out-dir", "a")[0] == 2
        assert run(capsys, "experiment", "size-gen", "--config", "a.json", "--data", ucg, "--out-dir", "a", "--workers", 0)[0] == 2
