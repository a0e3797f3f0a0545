"""Command-line entry point: train, finetune, eval, predict, gradcheck, hpo."""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import plotting
from .data import load_dataset, load_manifest
from .gradcheck import run_suite
from .model import ModelConfig, build_model
from .tpe import DEFAULT_SPACE, SearchSpace, best_so_far, optimize, read_trials
from .training import (
    TrainConfig,
    evaluate,
    finetune,
    predict,
    primary_metric,
    train,
    write_history,
)
from .weights import load_weights, save_weights

log = logging.getLogger("facechannel")

WEIGHTS_FILE = "weights.fcw"
HISTORY_FILE = "history.csv"
REPORT_FILE = "eval.json"


class CLIError(Exception):
    pass


def load_config(path):
    """Read a TOML or JSON document with optional ``model`` and ``train`` tables."""
    if not path:
        return {}, {}
    if not os.path.exists(path):
        raise CLIError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if path.endswith(".json"):
        doc = json.loads(raw)
    else:
        doc = tomllib.loads(raw.decode("utf-8"))
    unknown = set(doc) - {"model", "train"}
    if unknown:
        raise CLIError(f"unknown config sections: {sorted(unknown)}")
    return dict(doc.get("model", {})), dict(doc.get("train", {}))


def resolve_configs(args):
    model_d, train_d = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        model_d["seed"] = args.seed
        train_d["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        train_d["epochs"] = args.epochs
    model_cfg = ModelConfig.from_dict(model_d)
    train_cfg = TrainConfig.from_dict(train_d)
    return model_cfg, train_cfg, model_d


def _load_data(path, args, num_classes):
    if path is None:
        return None
    k = num_classes if num_classes and num_classes > 0 else None
    manifest = load_manifest(path, num_classes=k, neutral_class=args.neutral_class)
    return load_dataset(manifest)


def _data_classes(model_cfg):
    return model_cfg.num_classes if model_cfg.head != "dimensional" else None


def _write_outputs(model, history, val, out, per_group):
    os.makedirs(out, exist_ok=True)
    save_weights(model, os.path.join(out, WEIGHTS_FILE))
    write_history(history, os.path.join(out, HISTORY_FILE))
    plotting.plot_history(history, os.path.join(out, "history.png"))
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(model.config.to_dict(), fh, indent=2, sort_keys=True)
    if val is not None:
        report = evaluate(model, val, per_group=per_group)
        with open(os.path.join(out, REPORT_FILE), "w") as fh:
            fh.write(report.to_json() + "\n")
        _report_figure(model, val, report, out)


def _report_figure(model, data, report, out):
    if report.confusion is not None:
        plotting.plot_confusion(report.confusion, os.path.join(out, "confusion.png"))
    else:
        pred = predict(model, data.images)["dimensional"]
        plotting.plot_dimensional(pred, data.labels, os.path.join(out, "dimensional.png"))


def cmd_train(args):
    model_cfg, train_cfg, _ = resolve_configs(args)
    data = _load_data(args.train_manifest, args, _data_classes(model_cfg))
    val = _load_data(args.val_manifest, args, _data_classes(model_cfg))
    model = build_model(model_cfg)
    history = train(model, data, train_cfg, val)
    _write_outputs(model, history, val, args.out, args.ccc_per_group)
    return 0


def cmd_finetune(args):
    if not os.path.exists(args.weights):
        raise CLIError(f"weight file not found: {args.weights}")
    model_cfg, train_cfg, model_d = resolve_configs(args)
    model = load_weights(args.weights)
    if args.freeze_prefix is not None:
        n = len(model.units) if args.freeze_prefix == "all" else int(args.freeze_prefix)
        train_cfg.freeze_prefix = n
    k = model_cfg.num_classes if "num_classes" in model_d else model.config.num_classes
    if model.config.head == "dimensional":
        k = None
    data = _load_data(args.train_manifest, args, k)
    val = _load_data(args.val_manifest, args, k)
    if "dropout_rate" in model_d:
        for layer in model.layers:
            if layer.kind == "dropout":
                layer.rate = model_cfg.dropout_rate
    model, history = finetune(model, data, train_cfg, val)
    _write_outputs(model, history, val, args.out, args.ccc_per_group)
    return 0


def cmd_eval(args):
    model = load_weights(args.weights)
    k = None if model.config.head == "dimensional" else model.config.num_classes
    data = _load_data(args.manifest, args, k)
    report = evaluate(model, data, per_group=args.ccc_per_group)
    print(report.to_json())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, REPORT_FILE), "w") as fh:
            fh.write(report.to_json() + "\n")
        _report_figure(model, data, report, args.out)
    return 0


def cmd_predict(args):
    model = load_weights(args.weights)
    manifest = load_manifest(args.manifest, num_classes=None if model.config.head == "dimensional"
                             else model.config.num_classes, neutral_class=args.neutral_class)
    data = load_dataset(manifest)
    preds = predict(model, data.images)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        header = ["path"]
        if "categorical" in preds:
            header += ["class"] + [f"p{i}" for i in range(preds["categorical"].shape[1])]
        if "dimensional" in preds:
            header += ["valence", "arousal"]
        w.writerow(header)
        for i, path in enumerate(manifest.paths):
            row = [os.path.relpath(path, os.path.dirname(os.path.abspath(args.manifest)))]
            if "categorical" in preds:
                p = preds["categorical"][i]
                row += [int(np.argmax(p))] + [f"{v:.6f}" for v in p]
            if "dimensional" in preds:
                row += [f"{v:.6f}" for v in preds["dimensional"][i]]
            w.writerow(row)
    finally:
        if args.out:
            out.close()
    return 0


def cmd_gradcheck(args):
    reports = run_suite(range(args.seeds))
    for rep in reports:
        print(rep)
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return 1 if failed else 0


TRAIN_KEYS = {"learning_rate", "momentum", "batch_size", "epochs", "loss"}


def cmd_hpo(args):
    model_cfg, train_cfg, model_d = resolve_configs(args)
    space = SearchSpace.load(args.space) if args.space else SearchSpace.from_dict(DEFAULT_SPACE)
    data = _load_data(args.train_manifest, args, _data_classes(model_cfg))
    val = _load_data(args.val_manifest, args, _data_classes(model_cfg)) if args.val_manifest else data
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "trials.jsonl")

    def objective(point):
        m = ModelConfig.from_dict({**model_d, **{k: v for k, v in point.items() if k not in TRAIN_KEYS},
                                   "enforce_budget": model_cfg.enforce_budget})
        t = TrainConfig.from_dict({**train_cfg.to_dict(),
                                   **{k: v for k, v in point.items() if k in TRAIN_KEYS}})
        model = build_model(m)
        train(model, data, t)
        # minimized: negate accuracy / mean CCC
        return -primary_metric(evaluate(model, val))

    history = read_trials(log_path)
    seed = args.seed if args.seed is not None else 0
    best, history = optimize(objective, space, args.budget, seed=seed, history=history, log_path=log_path)
    if best is None:
        raise CLIError("every trial failed")
    result = {"trial": best.number, "objective": best.objective, "config": best.config}
    with open(os.path.join(args.out, "best_config.json"), "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    objectives = [np.nan if t.objective is None else t.objective for t in history]
    plotting.plot_trials(objectives, best_so_far(history), os.path.join(args.out, "trials.png"))
    print(json.dumps(result, sort_keys=True))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="facechannel", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifests=True):
        sp.add_argument("--config", help="TOML or JSON file with [model] and [train] tables")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--neutral-class", action="store_true",
                        help="map the label 'neutral' to the last class index")
        sp.add_argument("--ccc-per-group", action="store_true",
                        help="average CCC over manifest groups instead of pooling")
        if manifests:
            sp.add_argument("--train-manifest", required=True)
            sp.add_argument("--val-manifest")
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--out", required=True)

    sp = sub.add_parser("train", help="train from scratch (pretraining)")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("finetune", help="fine-tune pretrained weights")
    common(sp)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--freeze-prefix", help="number of leading trunk units to freeze, or 'all'")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("eval", help="print an evaluation report as JSON")
    common(sp, manifests=False)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", help="also write eval.json and a figure here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="write per-image predictions as CSV")
    common(sp, manifests=False)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", help="CSV path (standard output if omitted)")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every layer type")
    sp.add_argument("--seeds", type=int, default=5)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("hpo", help="TPE hyperparameter search")
    common(sp)
    sp.add_argument("--space", help="JSON search space (default: built-in space)")
    sp.add_argument("--budget", type=int, default=20)
    sp.set_defaults(func=cmd_hpo)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
