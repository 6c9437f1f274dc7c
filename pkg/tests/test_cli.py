import csv
import json

import numpy as np
import pytest

from adprog.cli import main
from adprog.rl.train import PolicyCheckpoint, TrainConfig, zero_policy


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = {"seed": 3, "cohort": {"n_subjects": 30},
           "pipeline": {"lambdas": [1.0], "initial_allocations": [[9, 1]], "k": 3,
                        "train": {"episodes_total": 100, "batch_trajectories": 50}}}
    (d / "cfg.json").write_text(json.dumps(cfg))
    assert main(["generate", "--config", str(d / "cfg.json"), "--out", str(d / "c.csv")]) == 0
    assert main(["estimate", "--cohort", str(d / "c.csv"), "--config", str(d / "cfg.json"),
                 "--out", str(d / "t.json")]) == 0
    return d


def test_generate_writes_cohort_and_demographics(work):
    rows = list(csv.DictReader(open(work / "c.csv")))
    assert len(rows) == 30 * 11
    demo = list(csv.DictReader(open(work / "c_demographics.csv")))
    assert len(demo) == 30


def test_generate_mask(work):
    main(["generate", "--seed", "1", "--mask", "--out", str(work / "m.csv")])
    rows = list(csv.DictReader(open(work / "m.csv")))
    kept = sum(r["avail_x"] in ("1", "True", "true") for r in rows)
    assert kept < len(rows)


def test_estimate_table(work):
    t = json.loads((work / "t.json").read_text())
    assert t["keys"] == ["feature_a", "feature_b"]
    assert t["groups"]


def test_train_predict_plot(work, capsys):
    assert main(["train", "--cohort", str(work / "c.csv"), "--table", str(work / "t.json"),
                 "--out", str(work / "p.npz"), "--curve", str(work / "curve.csv"),
                 "--episodes", "500", "--lambda", "1", "--I0", "9,1"]) == 0
    out = capsys.readouterr().out
    assert out.count("mean reward") == 5
    assert len((work / "curve.csv").read_text().splitlines()) == 6
    assert main(["predict", "--cohort", str(work / "c.csv"), "--table", str(work / "t.json"),
                 "--checkpoint", str(work / "p.npz"), "--out", str(work / "pred.csv")]) == 0
    rows = list(csv.DictReader(open(work / "pred.csv")))
    assert len(rows) == 30 * 11
    assert main(["plot", "--trajectories", str(work / "pred.csv"), "--out",
                 str(work / "plots")]) == 0
    assert sorted(p.name for p in (work / "plots").iterdir()) == [
        "activity.svg", "cognition.svg", "information.svg"]


def test_zero_checkpoint_predicts_population_start(work):
    ck = PolicyCheckpoint(zero_policy(2), TrainConfig.desk(population_I0=(7.0, 3.0)))
    ck.save(work / "zero.npz")
    main(["predict", "--cohort", str(work / "c.csv"), "--table", str(work / "t.json"),
          "--checkpoint", str(work / "zero.npz"), "--out", str(work / "z.csv")])
    rows = [r for r in csv.DictReader(open(work / "z.csv")) if r["t"] == "0"]
    assert rows and all((float(r["I_1"]), float(r["I_2"])) == (7.0, 3.0) for r in rows)


def test_predict_without_rl(work):
    main(["predict", "--cohort", str(work / "c.csv"), "--table", str(work / "t.json"),
          "--method", "without_rl", "--I0", "9,1", "--lambda", "1", "--out", str(work / "g.csv")])
    rows = list(csv.DictReader(open(work / "g.csv")))
    assert {r["method"] for r in rows} == {"without_rl"}


def test_evaluate(work):
    assert main(["evaluate", "--cohort", str(work / "c.csv"), "--config", str(work / "cfg.json"),
                 "--out", str(work / "report")]) == 0
    names = sorted(p.name for p in (work / "report").iterdir())
    assert names == ["config.json", "flags.json", "grid.csv", "metrics.csv", "trajectories.csv"]
    assert not list(work.glob("*.part"))


def test_rl_predict_requires_checkpoint(work):
    with pytest.raises(SystemExit):
        main(["predict", "--cohort", str(work / "c.csv"), "--table", str(work / "t.json"),
              "--out", str(work / "x.csv")])
    assert not (work / "x.csv").exists()
