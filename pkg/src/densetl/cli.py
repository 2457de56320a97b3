"""Command line: ``densetl {train,sweep,predict,eval,inspect}``.

Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 data error, 4 model-file error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, ExperimentConfig, load_config, set_key
from .data import DataError
from .densenet import param_count
from .experiment import (
    SWEEP_AXES,
    emit_report,
    predict_cmd,
    run_sweep,
    run_training,
)
from .metrics import percent
from .model_io import ModelFormatError, load_checkpoint, read_header

EXIT_CONFIG, EXIT_DATA, EXIT_MODEL, EXIT_OTHER = 2, 3, 4, 1


def _run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--data-dir", help="directory with one subdirectory per class")
    p.add_argument("--synthetic", action="store_true", help="use the generated 3-class blob dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--optimizer", choices=["adam", "sgd", "rmsprop"])
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set densenet.preset=toy")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densetl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _run_options(p)
    p.add_argument("--resume", help="continue from a model.dgm written by the same config")

    p = sub.add_parser("sweep", help="one run per dropout rate or optimizer")
    _run_options(p)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", help="comma-separated axis values (default: the full axis)")

    for name, helptext in (("predict", "classify images with a saved model"),
                           ("eval", "score a saved model on a labelled directory")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", required=True)
        p.add_argument("--data-dir", help="labelled directory (one subdirectory per class)")
        p.add_argument("--out", help="write the report here (.json or .csv)")
        if name == "predict":
            p.add_argument("inputs", nargs="*", help="image files")
            p.add_argument("--labels", help="comma-separated class indices aligned with inputs")

    p = sub.add_parser("inspect", help="describe a model file or a config's architecture")
    p.add_argument("--model")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    return parser


def config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        set_key(cfg, key, value)
    flags = {
        "data_dir": getattr(args, "data_dir", None),
        "seed": getattr(args, "seed", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "head.dropout": getattr(args, "dropout", None),
        "optimizer.kind": getattr(args, "optimizer", None),
        "out": getattr(args, "out", None),
    }
    for key, value in flags.items():
        if value is not None:
            set_key(cfg, key, value)
    if getattr(args, "synthetic", False):
        cfg.synthetic.enabled = True
    return cfg


def _print_metrics(prefix: str, m) -> None:
    print(f"{prefix}accuracy {percent(m.accuracy)}%  precision {percent(m.precision_macro)}%  "
          f"recall {percent(m.recall_macro)}%  f1 {percent(m.f1_macro)}%  "
          f"correct {m.correct_count}/{m.total}")


def cmd_train(args) -> int:
    report = run_training(config_from_args(args), resume=args.resume)
    print(f"train acc {percent(report.train_acc)}%  val acc {percent(report.val_acc)}%")
    _print_metrics("", report.metrics)
    print(f"model written to {report.model_path} ({report.wall_time:.1f}s)")
    return 0


def cmd_sweep(args) -> int:
    values = [v.strip() for v in args.values.split(",")] if args.values else None
    cfg = config_from_args(args)
    report = run_sweep(cfg, args.axis, values)
    print(report.table(), end="")
    print(f"csv written to {Path(cfg.out) / f'sweep_{args.axis}.csv'}")
    return 0


def _write(report, out: Optional[str]) -> None:
    if out:
        emit_report(report, "csv" if out.endswith(".csv") else "structured-text", out)


def cmd_predict(args) -> int:
    labels = [int(v) for v in args.labels.split(",")] if args.labels else None
    if not args.inputs and not args.data_dir:
        raise DataError("predict needs image paths or --data-dir")
    report = predict_cmd(args.model, args.inputs, labels, data_dir=args.data_dir)
    for item in report.items:
        probs = " ".join(f"{p:.4f}" for p in item["probabilities"])
        print(f"{item['source']}\t{item['class_name']}\t{probs}")
    if report.metrics is not None:
        _print_metrics("", report.metrics)
    _write(report, args.out)
    return 0


def cmd_eval(args) -> int:
    if not args.data_dir:
        raise DataError("eval needs --data-dir")
    report = predict_cmd(args.model, data_dir=args.data_dir)
    _print_metrics("", report.metrics)
    for name, row in zip(report.class_names, report.confusion.to_list()):
        print(f"  {name:>16}  " + " ".join(f"{v:5d}" for v in row))
    _write(report, args.out)
    return 0


def cmd_inspect(args) -> int:
    if args.model:
        header = read_header(args.model)
        model = load_checkpoint(args.model).model
        info = {"config": header["config"], "head": header["head"], "seed": header["seed"],
                "class_names": header["class_names"], "metadata_keys": sorted(header["metadata"])}
    else:
        from .densenet import build_model

        cfg = load_config(args.config) if args.config else ExperimentConfig()
        for item in args.set:
            key, _, value = item.partition("=")
            set_key(cfg, key, value)
        model = build_model(cfg.densenet_config(), cfg.head_config(), cfg.seed)
        info = {"config": cfg.to_dict()}
    trainable, total = param_count(model)
    info.update({
        "layers": len(model.layers),
        "backbone_layers": model.backbone_len,
        "channel_trace": model.channel_trace(),
        "spatial_trace": model.spatial_trace(),
        "head_widths": model.head.widths() if model.head else None,
        "params_trainable": trainable,
        "params_total": total,
    })
    print(json.dumps(info, indent=2))
    return 0


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "predict": cmd_predict,
            "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ModelFormatError as exc:
        print(f"error[model:{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
