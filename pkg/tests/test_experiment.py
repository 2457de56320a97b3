import csv
import json

import numpy as np
import pytest

from densetl.config import ConfigError, ExperimentConfig, parse_config_text
from densetl.data import DataError, synthetic_blobs, write_dataset
from densetl.experiment import (
    CURVE_COLUMNS,
    SWEEP_COLUMNS,
    ClassMismatchError,
    emit_report,
    predict_cmd,
    prepare_data,
    run_sweep,
    run_training,
)
from densetl.model_io import load_model

TOY = """
input_size = 16
batch_size = 8
epochs = 2
densenet.preset = toy
head.neurons = 8
synthetic.enabled = true
synthetic.per_class = 6
"""


def toy_cfg(out, **extra) -> ExperimentConfig:
    cfg = parse_config_text(TOY)
    cfg.out = str(out)
    for k, v in extra.items():
        setattr(cfg, k, v)
    return cfg


def test_training_writes_artifacts(tmp_path):
    report = run_training(toy_cfg(tmp_path / "r"))
    assert len(report.curves) == 2
    assert (tmp_path / "r" / "model.dgm").exists()
    with open(tmp_path / "r" / "curves.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == CURVE_COLUMNS and len(rows) == 3
    data = json.loads((tmp_path / "r" / "report.json").read_text())
    assert data["metrics"]["total"] == 4  # 18 records, 14 train / 4 val
    assert "wall_time" not in data
    model = load_model(tmp_path / "r" / "model.dgm")
    assert model.metadata["epochs_completed"] == 2
    assert model.class_names == ["early_blight", "healthy", "late_blight"]


def test_reruns_are_byte_identical(tmp_path):
    run_training(toy_cfg(tmp_path / "a"))
    first = {p: (tmp_path / "a" / p).read_bytes() for p in ("model.dgm", "report.json", "curves.csv")}
    run_training(toy_cfg(tmp_path / "a"))
    for p, blob in first.items():
        assert (tmp_path / "a" / p).read_bytes() == blob, p


def test_resume_matches_uninterrupted_run(tmp_path):
    straight = run_training(toy_cfg(tmp_path / "s", epochs=4))
    run_training(toy_cfg(tmp_path / "p", epochs=2))
    resumed = run_training(toy_cfg(tmp_path / "q", epochs=4), resume=str(tmp_path / "p" / "model.dgm"))
    assert [c.__dict__ for c in resumed.curves] == [c.__dict__ for c in straight.curves]
    assert (tmp_path / "q" / "model.dgm").read_bytes() == (tmp_path / "s" / "model.dgm").read_bytes()


def test_resume_rejects_different_architecture(tmp_path):
    run_training(toy_cfg(tmp_path / "p", epochs=1))
    cfg = toy_cfg(tmp_path / "q", epochs=2)
    cfg.head.neurons = 16
    with pytest.raises(ConfigError):
        run_training(cfg, resume=str(tmp_path / "p" / "model.dgm"))


def test_frozen_run_keeps_pretrained_backbone(tmp_path):
    pre = toy_cfg(tmp_path / "pre", freeze=False)
    pre.synthetic.task = "A"
    run_training(pre)
    cfg = toy_cfg(tmp_path / "ft", backbone_weights=str(tmp_path / "pre" / "model.dgm"))
    run_training(cfg)
    a, b = load_model(tmp_path / "pre" / "model.dgm"), load_model(tmp_path / "ft" / "model.dgm")
    for (name, x, _), (_, y, _) in zip(a.state_arrays(), b.state_arrays()):
        if int(name.split(".")[0]) < a.backbone_len:
            assert x.tobytes() == y.tobytes(), name


@pytest.mark.parametrize("axis,values,n", [("dropout", None, 6), ("optimizer", None, 3)])
def test_sweep_rows_and_schema(tmp_path, axis, values, n):
    cfg = toy_cfg(tmp_path / "sw", epochs=1)
    report = run_sweep(cfg, axis, values)
    with open(tmp_path / "sw" / f"sweep_{axis}.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == SWEEP_COLUMNS
    assert len(rows) == n + 1
    assert [r[0] for r in rows[1:]] == [str(v) for v in report.values]
    assert (tmp_path / "sw" / f"sweep_{axis}.txt").read_text().startswith(axis.capitalize())


def test_sweep_errors(tmp_path):
    with pytest.raises(ConfigError):
        run_sweep(toy_cfg(tmp_path), "batch")
    with pytest.raises(ConfigError):
        run_sweep(toy_cfg(tmp_path), "optimizer", ["lbfgs"])


def test_directory_data_and_test_split(tmp_path):
    write_dataset(synthetic_blobs(5, 20, 1), tmp_path / "train")
    write_dataset(synthetic_blobs(2, 16, 2), tmp_path / "test", "png")
    cfg = parse_config_text(TOY)
    cfg.synthetic.enabled = False
    cfg.data_dir, cfg.test_dir, cfg.out = str(tmp_path / "train"), str(tmp_path / "test"), str(tmp_path / "o")
    train, val, test = prepare_data(cfg)
    assert (len(train), len(val), len(test)) == (12, 3, 6)
    assert train.records[0].pixels.shape == (16, 16, 3)
    report = run_training(cfg)
    assert report.confusion.total == 6  # scored on the test directory

    pred = predict_cmd(tmp_path / "o" / "model.dgm", data_dir=tmp_path / "test")
    assert pred.metrics.total == 6 and len(pred.items) == 6
    np.testing.assert_allclose([sum(i["probabilities"]) for i in pred.items], 1.0, rtol=1e-5)
    emit_report(pred, "csv", tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0].startswith("source,predicted,class_name,p_")

    files = sorted((tmp_path / "test").rglob("*.png"))[:2]
    single = predict_cmd(tmp_path / "o" / "model.dgm", files, labels=[0, 0])
    assert single.metrics.total == 2
    with pytest.raises(DataError):
        predict_cmd(tmp_path / "o" / "model.dgm", files, labels=[0])
    with pytest.raises(ClassMismatchError):
        predict_cmd(tmp_path / "o" / "model.dgm", files, labels=[0, 7])


def test_class_count_mismatches(tmp_path):
    ds = synthetic_blobs(3, 16, 0)
    ds.class_names.append("extra")
    ds.records[0].label = 3
    write_dataset(ds, tmp_path / "four")
    cfg = toy_cfg(tmp_path / "o")
    cfg.synthetic.enabled = False
    cfg.data_dir = str(tmp_path / "four")
    with pytest.raises(ConfigError, match="classes"):
        prepare_data(cfg)
    run_training(toy_cfg(tmp_path / "m", epochs=0))
    with pytest.raises(ClassMismatchError):
        predict_cmd(tmp_path / "m" / "model.dgm", data_dir=tmp_path / "four")


def test_zero_epochs_gives_empty_curve(tmp_path):
    report = run_training(toy_cfg(tmp_path / "z", epochs=0))
    assert report.curves == []
    assert (tmp_path / "z" / "curves.csv").read_text() == ",".join(CURVE_COLUMNS) + "\n"
    assert 0.0 <= report.val_acc <= 1.0 and report.confusion.total == 4


def test_single_value_sweep_matches_run(tmp_path):
    sweep = run_sweep(toy_cfg(tmp_path / "sw"), "dropout", [0.2])
    cfg = toy_cfg(tmp_path / "one")
    cfg.head.dropout = 0.2
    run = run_training(cfg)
    row = sweep.rows()[0]
    assert row["train_acc"] == f"{100 * run.train_acc:.1f}" and row["f1"] == f"{100 * run.metrics.f1_macro:.1f}"
    with open(tmp_path / "sw" / "sweep_dropout.csv", newline="") as fh:
        raw = fh.read()
    assert '"' not in raw and list(csv.reader(raw.splitlines()))[1][0] == "0.2"


def test_unlabelled_prediction_has_no_metrics(tmp_path):
    run_training(toy_cfg(tmp_path / "m", epochs=0))
    write_dataset(synthetic_blobs(1, 16, 3), tmp_path / "d", "png")
    files = sorted((tmp_path / "d").rglob("*.png"))
    report = predict_cmd(tmp_path / "m" / "model.dgm", files)
    assert report.metrics is None and "metrics" not in report.to_dict()
    assert len(report.items) == 3


@pytest.mark.slow
def test_toy_run_fits_and_predicts_fixtures(tmp_path):
    cfg = parse_config_text(TOY.replace("input_size = 16", "input_size = 32").replace("epochs = 2", "epochs = 30")
                            .replace("per_class = 6", "per_class = 40").replace("head.neurons = 8", "head.neurons = 32")
                            .replace("batch_size = 8", "batch_size = 32"))
    cfg.freeze = False
    cfg.out = str(tmp_path / "r")
    report = run_training(cfg)
    assert report.train_acc >= 0.95
    fixtures = synthetic_blobs(14, 32, seed=99)
    fixtures.records = fixtures.records[:40]
    write_dataset(fixtures, tmp_path / "fx", "png")
    pred = predict_cmd(tmp_path / "r" / "model.dgm", data_dir=tmp_path / "fx")
    assert pred.metrics.total == 40
    assert pred.metrics.correct_count == 40 and pred.metrics.accuracy == 1.0
