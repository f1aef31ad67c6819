from __future__ import annotations

import numpy as np
import pytest

from flowclass import features
from flowclass.cli import main

SCENARIO = """
[scenario]
duration_days = 0.25
seed = 3

[category Busy]
id = 1
user_rate = 30
control_rate = 3
user_lengths = 1000:100:1

[category Quiet]
id = 2
user_rate = 2
control_rate = 1
user_lengths = 120:20:1

[device busy-a]
mac = 02:00:00:00:01:01
category = 1
seed = 1
split = train

[device busy-b]
mac = 02:00:00:00:01:02
category = 1
seed = 2
split = test

[device quiet-a]
mac = 02:00:00:00:02:01
category = 2
seed = 3
split = train

[device quiet-b]
mac = 02:00:00:00:02:02
category = 2
seed = 4
split = test
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "scenario.ini").write_text(SCENARIO)
    assert main(["synth", "--scenario", str(d / "scenario.ini"), "--out", str(d / "cap.csv"),
                 "--labels-out", str(d / "devices.csv"), "--split-out", str(d / "split.txt")]) == 0
    assert main(["ingest", "--input", str(d / "cap.csv"), "--devices", str(d / "devices.csv"),
                 "--out", str(d / "streams")]) == 0
    assert main(["featurize", "--streams", str(d / "streams"), "--interval-secs", "120",
                 "--window", "4", "--overlap", "2", "--out", str(d / "ds.csv")]) == 0
    (d / "cfg.txt").write_text("lstm_hidden = 4\nconv_filters = 2\nepochs = 2\n")
    return d


def test_pipeline_files(pipeline):
    d = pipeline
    assert len(list((d / "streams").glob("02-*.csv"))) == 4
    ds = features.read_dataset(d / "ds.csv")
    assert ds.window == 4 and ds.schema == features.DEFAULT_FEATURES
    assert set(ds.labels.tolist()) == {1, 2}


@pytest.mark.parametrize("algo", ["cascade", "knn", "tree"])
def test_train_and_predict(pipeline, algo, capsys):
    d = pipeline
    model = d / f"{algo}.txt"
    assert main(["train", "--dataset", str(d / "ds.csv"), "--algo", algo, "--config", str(d / "cfg.txt"),
                 "--model-out", str(model)]) == 0
    assert main(["predict", "--model", str(model), "--dataset", str(d / "ds.csv"),
                 "--out", str(d / f"{algo}.labels")]) == 0
    labels = np.loadtxt(d / f"{algo}.labels", dtype=int)
    assert len(labels) == len(features.read_dataset(d / "ds.csv"))
    assert "accuracy" in capsys.readouterr().out


def test_eval_writes_reports(pipeline, capsys):
    d = pipeline
    assert main(["eval", "--dataset", str(d / "ds.csv"), "--split", str(d / "split.txt"), "--algo", "knn",
                 "--repeats", "2", "--out", str(d / "report")]) == 0
    assert (d / "report" / "summary.txt").exists()
    assert "knn: mean accuracy" in capsys.readouterr().out


def test_sweep_prints_table(pipeline, capsys):
    d = pipeline
    out = d / "sweep.csv"
    assert main(["sweep", "--param", "interval", "--values", "120,300", "--streams", str(d / "streams"),
                 "--split", str(d / "split.txt"), "--algo", "tree", "--window", "4", "--overlap", "2",
                 "--repeats", "1", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "interval,mean_accuracy,std_accuracy,repeats" and len(lines) == 3
    assert capsys.readouterr().out.startswith("interval,")


def test_errors_return_nonzero(tmp_path, capsys):
    assert main(["ingest", "--input", str(tmp_path / "missing.csv"), "--devices", str(tmp_path / "d.csv"),
                 "--out", str(tmp_path / "s")]) == 1
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["train", "--dataset", "x", "--model-out", "y", "--algo", "svm"])
