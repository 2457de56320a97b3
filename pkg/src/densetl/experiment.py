"""Training runs, dropout/optimizer sweeps, prediction and report files.

Randomness is keyed rather than streamed: the epoch permutation by
(seed, epoch), augmentation by (seed, epoch, record), dropout masks by
(seed, epoch, step). A run resumed from a checkpoint therefore replays
exactly the batches and masks the uninterrupted run would have seen.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig
from .data import DataError, Dataset, batches, load_dataset, normalize, read_image, resize, resize_pixels, split, synthetic_blobs
from .densenet import Model, build_model, freeze_base
from .metrics import ConfusionMatrix, MetricReport, confusion, percent, summarize
from .model_io import ModelFormatError, load_checkpoint, load_model, restore_optimizer, save_model
from .nn import softmax, softmax_cross_entropy
from .optim import Optimizer
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

SWEEP_AXES = {
    "dropout": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
    "optimizer": ["adam", "sgd", "rmsprop"],
}
SWEEP_COLUMNS = ["axis_value", "train_acc", "val_acc", "cm_acc", "precision", "recall", "f1"]
CURVE_COLUMNS = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]


class ClassMismatchError(DataError):
    pass


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class RunReport:
    curves: list[EpochStats]
    train_acc: float
    val_acc: float
    metrics: MetricReport
    confusion: ConfusionMatrix
    config: dict
    model_path: Optional[str]
    wall_time: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "curves": [asdict(e) for e in self.curves],
            "train_acc": self.train_acc,
            "val_acc": self.val_acc,
            "metrics": self.metrics.to_dict(),
            "confusion": {"counts": self.confusion.to_list(), "class_names": self.confusion.class_names},
            "config": self.config,
            "model_path": self.model_path,
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d


@dataclass
class SweepReport:
    axis: str
    values: list
    runs: list[RunReport]

    def rows(self) -> list[dict[str, str]]:
        out = []
        for value, run in zip(self.values, self.runs):
            m = run.metrics
            out.append({
                "axis_value": str(value),
                "train_acc": percent(run.train_acc),
                "val_acc": percent(run.val_acc),
                "cm_acc": percent(m.accuracy),
                "precision": percent(m.precision_macro),
                "recall": percent(m.recall_macro),
                "f1": percent(m.f1_macro),
            })
        return out

    def table(self) -> str:
        titles = [self.axis.capitalize(), "Training", "Validation", "Accuracy", "Precision", "Recall", "F1-Score"]
        rows = [[r[c] for c in SWEEP_COLUMNS] for r in self.rows()]
        widths = [max(len(t), *(len(r[i]) for r in rows)) for i, t in enumerate(titles)]
        lines = ["  ".join(t.ljust(w) for t, w in zip(titles, widths))]
        lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
        return "\n".join(lines) + "\n"


@dataclass
class PredictionReport:
    items: list[dict]
    class_names: list[str]
    metrics: Optional[MetricReport] = None
    confusion: Optional[ConfusionMatrix] = None

    def to_dict(self) -> dict:
        d = {"class_names": self.class_names, "predictions": self.items}
        if self.metrics is not None:
            d["metrics"] = self.metrics.to_dict()
            d["confusion"] = self.confusion.to_list()
        return d


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def _resized(ds: Dataset, size: int) -> Dataset:
    return ds.map(lambda r: r if r.pixels.shape[:2] == (size, size) else resize(r, size, size))


def prepare_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Optional[Dataset]]:
    """(train, validation, optional test) datasets at the configured input size."""
    if cfg.synthetic.enabled:
        seed = cfg.seed if cfg.synthetic.seed is None else cfg.synthetic.seed
        ds = synthetic_blobs(cfg.synthetic.per_class, cfg.input_size, seed, cfg.synthetic.task)
    else:
        ds = load_dataset(cfg.data_dir)
    if len(ds.class_names) != cfg.head.classes:
        raise ConfigError(f"dataset has {len(ds.class_names)} classes but head.classes = {cfg.head.classes}")
    train, val = split(_resized(ds, cfg.input_size), cfg.train_fraction, cfg.seed)
    if len(val) == 0:
        raise DataError("validation split is empty; add data or lower train_fraction")
    test = None
    if cfg.test_dir:
        test = _resized(load_dataset(cfg.test_dir), cfg.input_size)
        if test.class_names != ds.class_names:
            raise ClassMismatchError(f"test classes {test.class_names} differ from {ds.class_names}")
    return train, val, test


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def evaluate(model: Model, ds: Dataset, batch_size: int = 64) -> tuple[float, np.ndarray, np.ndarray]:
    """Eval-mode pass: (mean loss, predictions, probabilities). Mutates nothing."""
    loss_sum, preds, probs = 0.0, [], []
    for b in batches(ds, batch_size, shuffle=False):
        logits = model(b.x, train=False)
        loss, p = softmax_cross_entropy(logits, b.y)
        loss_sum += loss.item() * len(b.labels)
        preds.append(p.argmax(axis=1))
        probs.append(p)
    return loss_sum / len(ds), np.concatenate(preds), np.concatenate(probs)


def load_backbone_weights(model: Model, path) -> None:
    """Copy backbone tensors from a saved model with the same backbone config."""
    source = load_model(path)
    if source.config != model.config:
        raise ConfigError(f"{path}: backbone config differs from the run's densenet config")
    src = {name: arr for name, arr, _ in source.state_arrays()}
    n = 0
    for name, arr, _ in model.state_arrays():
        if int(name.split(".", 1)[0]) < model.backbone_len:
            arr[...] = src[name]
            n += 1
    log.info("loaded %d backbone tensors from %s", n, path)


def _step_rng(seed: int, epoch: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, step, 11])


def run_training(cfg: ExperimentConfig, resume: Optional[str] = None,
                 data: Optional[tuple] = None) -> RunReport:
    """Train per ``cfg`` and write model.dgm, report.json and curves.csv under ``cfg.out``.

    ``resume`` continues from a checkpoint written by an earlier run of the
    same config; ``data`` injects pre-built (train, val, test) datasets.
    """
    cfg.validate()
    started = time.perf_counter()
    train_ds, val_ds, test_ds = data if data is not None else prepare_data(cfg)
    hyper = cfg.optimizer_hyper()
    curves: list[EpochStats] = []

    if resume:
        ckpt = load_checkpoint(resume)
        model = ckpt.model
        if model.config != cfg.densenet_config() or model.head != cfg.head_config():
            raise ConfigError(f"{resume}: checkpoint architecture differs from the config")
        start_epoch = int(model.metadata.get("epochs_completed", 0))
        curves = [EpochStats(**e) for e in model.metadata.get("curves", [])]
        params = model.trainable_parameters()
        optimizer = restore_optimizer(ckpt, params) if ckpt.optimizer_hyper else Optimizer(params, hyper)
    else:
        model = build_model(cfg.densenet_config(), cfg.head_config(), cfg.seed, train_ds.class_names)
        if cfg.backbone_weights:
            load_backbone_weights(model, cfg.backbone_weights)
        if cfg.freeze:
            freeze_base(model)
        start_epoch = 0
        params = model.trainable_parameters()
        if not params:
            raise ConfigError("model has no trainable parameters")
        optimizer = Optimizer(params, hyper)

    augment_spec = cfg.augment_spec()
    ptensors = [p for _, p in params]
    for epoch in range(start_epoch, cfg.epochs):
        loss_sum, correct, seen = 0.0, 0, 0
        for step, b in enumerate(batches(train_ds, cfg.batch_size, True, cfg.seed, epoch, augment_spec)):
            logits = model(b.x, train=True, rng=_step_rng(cfg.seed, epoch, step))
            loss, probs = softmax_cross_entropy(logits, b.y)
            optimizer.step(backward(loss, ptensors))
            loss_sum += loss.item() * len(b.labels)
            correct += int((probs.argmax(axis=1) == b.labels).sum())
            seen += len(b.labels)
        val_loss, val_preds, _ = evaluate(model, val_ds, cfg.batch_size)
        stats = EpochStats(epoch + 1, loss_sum / seen, correct / seen, val_loss,
                           float((val_preds == val_ds.labels()).mean()))
        curves.append(stats)
        log.info("epoch %d/%d loss %.4f acc %.4f val_loss %.4f val_acc %.4f", stats.epoch, cfg.epochs,
                 stats.train_loss, stats.train_acc, stats.val_loss, stats.val_acc)

    if curves:
        train_acc, val_acc = curves[-1].train_acc, curves[-1].val_acc
    else:
        _, p, _ = evaluate(model, train_ds, cfg.batch_size)
        train_acc = float((p == train_ds.labels()).mean())
        _, p, _ = evaluate(model, val_ds, cfg.batch_size)
        val_acc = float((p == val_ds.labels()).mean())

    eval_ds = test_ds if test_ds is not None else val_ds
    _, preds, _ = evaluate(model, eval_ds, cfg.batch_size)
    cm = confusion(preds, eval_ds.labels(), len(eval_ds.class_names), eval_ds.class_names)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model.metadata = {
        "epochs_completed": cfg.epochs,
        "curves": [asdict(e) for e in curves],
        "class_names": train_ds.class_names,
    }
    model_path = save_model(model, out / "model.dgm", optimizer)
    report = RunReport(curves, train_acc, val_acc, summarize(cm), cm, cfg.to_dict(),
                       str(model_path), time.perf_counter() - started)
    emit_report(report, "structured-text", out / "report.json")
    emit_report(report, "csv", out / "curves.csv")
    log.info("run finished in %.1fs", report.wall_time)
    return report


def _axis_value(axis: str, value):
    if axis == "dropout":
        return float(value)
    if axis == "optimizer":
        return str(value)
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")


def run_sweep(cfg: ExperimentConfig, axis: str, values: Optional[Sequence] = None) -> SweepReport:
    """One training run per axis value with everything else (seed, split) held fixed."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    values = [_axis_value(axis, v) for v in (values if values is not None else SWEEP_AXES[axis])]
    if not values:
        raise ConfigError("sweep needs at least one axis value")
    cfg.validate()
    data = prepare_data(cfg)
    runs = []
    for value in values:
        run_cfg = cfg.copy()
        if axis == "dropout":
            run_cfg.head.dropout = value
        else:
            run_cfg.optimizer.kind = value
        run_cfg.out = str(Path(cfg.out) / f"{axis}-{value}")
        try:
            runs.append(run_training(run_cfg, data=data))
        except (ConfigError, DataError, ModelFormatError) as exc:
            raise type(exc)(f"sweep {axis}={value}: {exc}") from None
    report = SweepReport(axis, values, runs)
    out = Path(cfg.out)
    emit_report(report, "csv", out / f"sweep_{axis}.csv")
    emit_report(report, "structured-text", out / f"sweep_{axis}.txt")
    return report


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def predict(model: Model, images: Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
    """Softmax probabilities for H×W×3 uint8 images, resized to the model input."""
    h, w, _ = model.config.input_size
    probs = []
    for start in range(0, len(images), batch_size):
        chunk = [resize_pixels(px, h, w) if px.shape[:2] != (h, w) else px
                 for px in images[start:start + batch_size]]
        x = Tensor(np.stack([normalize(px) for px in chunk]))
        probs.append(softmax(model(x, train=False).data))
    return np.concatenate(probs) if probs else np.zeros((0, model.head.n_classes))


def predict_cmd(model_path, inputs: Sequence = (), labels: Optional[Sequence[int]] = None,
                data_dir=None) -> PredictionReport:
    """Classify image files, or a labelled class-per-directory tree via ``data_dir``."""
    model = load_model(model_path)
    if model.head is None:
        raise ModelFormatError(f"{model_path}: model has no classification head")
    k = model.head.n_classes
    names = model.class_names or [str(i) for i in range(k)]
    if data_dir is not None:
        ds = load_dataset(data_dir)
        if len(ds.class_names) != k:
            raise ClassMismatchError(f"{data_dir} has {len(ds.class_names)} classes, model predicts {k}")
        sources = [r.source_id for r in ds.records]
        images = [r.pixels for r in ds.records]
        labels = ds.labels()
    else:
        sources = [str(p) for p in inputs]
        images = [read_image(p) for p in inputs]
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size != len(images):
            raise DataError(f"{labels.size} labels for {len(images)} images")
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ClassMismatchError(f"labels outside the model's {k} classes")

    probs = predict(model, images)
    preds = probs.argmax(axis=1) if len(images) else np.zeros(0, dtype=np.int64)
    items = [{"source": s, "predicted": int(p), "class_name": names[int(p)],
              "probabilities": [float(v) for v in row]}
             for s, p, row in zip(sources, preds, probs)]
    report = PredictionReport(items, names)
    if labels is not None and len(images):
        report.confusion = confusion(preds, labels, k, names)
        report.metrics = summarize(report.confusion)
    return report


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def emit_report(report, fmt: str, path) -> Path:
    """Write a run, sweep or prediction report as ``csv`` or ``structured-text`` (JSON)."""
    if fmt not in ("csv", "structured-text"):
        raise ValueError(f"unknown report format {fmt!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(report, SweepReport):
        if fmt == "csv":
            text = _csv_text(SWEEP_COLUMNS, [[r[c] for c in SWEEP_COLUMNS] for r in report.rows()])
        else:
            text = report.table()
    elif isinstance(report, RunReport):
        if fmt == "csv":
            text = _csv_text(CURVE_COLUMNS, [
                [e.epoch, f"{e.train_loss:.6f}", f"{e.train_acc:.6f}", f"{e.val_loss:.6f}", f"{e.val_acc:.6f}"]
                for e in report.curves
            ])
        else:
            text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    elif isinstance(report, PredictionReport):
        if fmt == "csv":
            text = _csv_text(["source", "predicted", "class_name"] + [f"p_{n}" for n in report.class_names],
                             [[i["source"], i["predicted"], i["class_name"]]
                              + [f"{v:.6f}" for v in i["probabilities"]] for i in report.items])
        else:
            text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    else:
        raise TypeError(f"cannot emit {type(report).__name__}")
    path.write_text(text, encoding="utf-8")
    return path
