"""Command-line entry point: ``kbrn <command> [options]``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import math
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

from .analysis import export_activation_shapes, mean_trace
from .benchmarks import SequenceDataset, gen_prefix_task
from .gradcheck import TOLERANCE, gradcheck_suite
from .model import CELL_TYPES, ModelConfig, SequenceClassifier
from .training import TrainConfig, TrainingDiverged, accuracy, fmt, train

log = logging.getLogger("kbrn")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

DEFAULT_CONFIG = {
    "model": {f.name: f.default for f in fields(ModelConfig)},
    "train": {f.name: f.default for f in fields(TrainConfig) if f.name != "seed"},
    "data": {
        "T": 10,
        "prefix_len": 1,
        "num_classes": 2,
        "alphabet": 5,
        "n_train": 2000,
        "n_test": 500,
        "disjoint_noise": False,
        "path": None,
    },
    "sweep": {"lengths": [10, 25, 50, 100], "cells": list(CELL_TYPES)},
    "output": "runs",
    "seed": 0,
}

DATA_TYPES = {"T": int, "prefix_len": int, "num_classes": int, "alphabet": int,
              "n_train": int, "n_test": int, "disjoint_noise": bool, "path": (str, type(None))}


class ConfigError(ValueError):
    pass


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _fail(text, path, key, msg):
    line = _line_of(text, key) if key else None
    where = f"{path}:{line}" if line else str(path)
    raise ConfigError(f"{where}: {msg}")


def load_config(path) -> dict:
    """Parse and validate an experiment config, merged over the defaults."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}:1: config must be a JSON object")
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    for key, value in raw.items():
        if key not in cfg:
            _fail(text, path, key, f"unknown key {key!r}")
        if isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                _fail(text, path, key, f"section {key!r} must be an object")
            for sub, v in value.items():
                if sub not in cfg[key]:
                    _fail(text, path, sub, f"unknown key {key}.{sub}")
                cfg[key][sub] = v
        else:
            cfg[key] = value
    validate(cfg, text, path)
    return cfg


def validate(cfg: dict, text: str = "", path="<config>"):
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
        _fail(text, path, "seed", "seed must be a non-negative integer")
    if not isinstance(cfg["output"], str):
        _fail(text, path, "output", "output must be a string")
    for section, cls in (("model", ModelConfig), ("train", TrainConfig)):
        try:
            cls(**cfg[section])
        except (TypeError, ValueError) as exc:
            key = next((k for k in cfg[section] if k in str(exc)), section)
            _fail(text, path, key, f"{section}: {exc}")
    data = cfg["data"]
    for k, typ in DATA_TYPES.items():
        v = data[k]
        if not isinstance(v, typ) or (typ is int and isinstance(v, bool)):
            _fail(text, path, k, f"data.{k} has invalid type {type(v).__name__}")
    if data["path"] is None:
        try:
            gen_prefix_task(data["T"], data["prefix_len"], data["num_classes"], data["alphabet"],
                            0, 0, 0, data["disjoint_noise"])
        except ValueError as exc:
            key = "alphabet" if "alphabet" in str(exc) else ("T" if "T=" in str(exc) else "data")
            _fail(text, path, key, f"data: {exc}")
        if data["n_train"] < 1 or data["n_test"] < 1:
            _fail(text, path, "n_train", "data: n_train and n_test must be positive")
    sweep = cfg["sweep"]
    if not sweep["lengths"] or not all(isinstance(t, int) and t > data["prefix_len"]
                                       for t in sweep["lengths"]):
        _fail(text, path, "lengths", "sweep.lengths must be integers longer than the prefix")
    if not sweep["cells"] or any(c not in CELL_TYPES for c in sweep["cells"]):
        _fail(text, path, "cells", f"sweep.cells must be drawn from {CELL_TYPES}")


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k not in ("seed", "output")}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:10]


def run_dir(cfg: dict, kind: str, out: str | None) -> Path:
    base = Path(out if out is not None else cfg["output"])
    d = base / f"{kind}-{config_hash(cfg)}-s{cfg['seed']}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _datasets(cfg: dict, T: int | None = None):
    data = cfg["data"]
    if data["path"] is not None and T is None:
        root = Path(data["path"])
        try:
            meta = json.loads((root / "meta.json").read_text())
            return (SequenceDataset.load(root / "train.jsonl", meta),
                    SequenceDataset.load(root / "test.jsonl", meta))
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load dataset from {root}: {exc}") from exc
    return gen_prefix_task(T or data["T"], data["prefix_len"], data["num_classes"],
                           data["alphabet"], data["n_train"], data["n_test"], cfg["seed"],
                           data["disjoint_noise"])


def cmd_genbench(args, cfg) -> int:
    out = run_dir(cfg, "bench", args.out)
    train_set, test_set = _datasets(cfg)
    paths = [out / "train.jsonl", out / "test.jsonl", out / "meta.json"]
    train_set.save(paths[0])
    test_set.save(paths[1])
    meta = {k: v for k, v in train_set.meta.items() if k != "split"}
    meta.update(n_train=len(train_set), n_test=len(test_set))
    paths[2].write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    for p in paths:
        print(p)
    return EXIT_OK


def _train_one(cfg: dict, T: int | None = None):
    """Returns ``(model, history, test_acc, seconds, error)``."""
    train_set, test_set = _datasets(cfg, T)
    tc = TrainConfig(seed=cfg["seed"], **cfg["train"])
    t0 = time.perf_counter()
    try:
        model, history = train(ModelConfig(**cfg["model"]), train_set, tc, test_set)
    except TrainingDiverged as exc:
        return None, exc.history, math.nan, time.perf_counter() - t0, str(exc)
    acc = accuracy(model, test_set.inputs, test_set.labels)
    return model, history, acc, time.perf_counter() - t0, None


def cmd_train(args, cfg) -> int:
    out = run_dir(cfg, f"train-{cfg['model']['cell']}", args.out)
    model, history, acc, seconds, error = _train_one(cfg)
    (out / "history.csv").write_text(history.to_csv(timings=args.timings))
    summary = {
        "cell": cfg["model"]["cell"],
        "epochs": len(history),
        "final_test_acc": acc,
        "seconds": seconds,
        "epoch_seconds": [r.seconds for r in history.records],
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config": cfg,
    }
    if error:
        summary["error"] = error
        summary["last_good_epoch"] = len(history)
    else:
        (out / "model.json").write_text(model.to_json() + "\n")
    (out / "summary.json").write_text(json.dumps(summary, indent=1, default=str) + "\n")
    print(out)
    if error:
        print(f"error: training diverged: {error}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"final test accuracy {acc:.4f} after {len(history)} epochs")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    errors = gradcheck_suite(args.cell, args.seed, args.instances)
    worst = max(errors)
    print(f"{args.cell}: {len(errors)} instances, max relative error {worst:.3e} "
          f"(tolerance {TOLERANCE:g})")
    return EXIT_OK if worst <= TOLERANCE else EXIT_NUMERIC


def cmd_analyze(args) -> int:
    try:
        model = SequenceClassifier.from_json(Path(args.model).read_text())
        data_path = Path(args.data)
        meta_path = data_path.parent / "meta.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else None
        data = SequenceDataset.load(data_path, meta)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if data.alphabet != model.cell.input_size:
        print(f"error: dataset alphabet {data.alphabet} does not match model input "
              f"size {model.cell.input_size}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out) if args.out else Path(args.model).parent
    out.mkdir(parents=True, exist_ok=True)
    trace = mean_trace(model, data.inputs, data.labels)
    lo, hi, n = args.grid
    (out / "trace.csv").write_text(trace.to_csv())
    (out / "shapes.csv").write_text(export_activation_shapes(model, lo, hi, int(n)))
    print(out / "trace.csv")
    print(out / "shapes.csv")
    return EXIT_OK


def _sweep_point(job):
    cfg, T, cell = job
    cfg = copy.deepcopy(cfg)
    cfg["model"]["cell"] = cell
    cfg["data"]["path"] = None
    _, history, acc, seconds, _ = _train_one(cfg, T)
    return T, cell, acc, history.epochs_to(cfg["train"]["target_acc"]), seconds


def cmd_sweep(args, cfg) -> int:
    out = run_dir(cfg, "sweep", args.out)
    jobs = [(cfg, T, cell) for T in cfg["sweep"]["lengths"] for cell in cfg["sweep"]["cells"]]
    if args.parallel > 1:
        with ProcessPoolExecutor(args.parallel) as pool:
            results = list(pool.map(_sweep_point, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_sweep_point(job))
            T, cell, acc, e95, secs = results[-1]
            print(f"T={T} {cell}: test acc {acc:.4f}, epochs to target {e95}, {secs:.0f}s",
                  flush=True)
    header = ["T", "cell", "final_test_acc", "epochs_to_95"]
    rows = [[T, cell, fmt(acc), e95] for T, cell, acc, e95, _ in results]
    if args.timings:
        header.append("seconds")
        for row, r in zip(rows, results):
            row.append(fmt(r[4]))
    write_csv(out / "results.csv", header, rows)
    (out / "summary.json").write_text(json.dumps({
        "seconds": {f"{T}/{cell}": s for T, cell, _, _, s in results},
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config": cfg,
    }, indent=1) + "\n")
    print(out / "results.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kbrn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--out", help="output base directory (overrides config)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--print-default", action="store_true",
                        help="print a default config and exit")
        return sp

    with_config(sub.add_parser("genbench", help="generate benchmark datasets"))
    tr = with_config(sub.add_parser("train", help="train one model"))
    tr.add_argument("--timings", action="store_true", help="add wall-clock column to history.csv")
    sw = with_config(sub.add_parser("sweep", help="train every (length, cell) pair"))
    sw.add_argument("--parallel", type=int, default=1, help="grid points run concurrently")
    sw.add_argument("--timings", action="store_true", help="add wall-clock column to results.csv")

    gc = sub.add_parser("gradcheck", help="finite-difference check of BPTT")
    gc.add_argument("--cell", choices=CELL_TYPES, required=True)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--instances", type=int, default=20)

    an = sub.add_parser("analyze", help="gradient traces and activation shapes")
    an.add_argument("--model", required=True)
    an.add_argument("--data", required=True, help="JSON-lines dataset file")
    an.add_argument("--out", help="output directory (default: next to the model)")
    an.add_argument("--grid", nargs=3, type=float, default=(-4.0, 4.0, 201),
                    metavar=("LO", "HI", "N"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    if args.command == "gradcheck":
        return cmd_gradcheck(args)
    if args.command == "analyze":
        return cmd_analyze(args)
    if args.print_default:
        print(json.dumps(DEFAULT_CONFIG, indent=2))
        return EXIT_OK
    try:
        cfg = load_config(args.config) if args.config else copy.deepcopy(DEFAULT_CONFIG)
        if args.seed is not None:
            cfg["seed"] = args.seed
        handler = {"genbench": cmd_genbench, "train": cmd_train, "sweep": cmd_sweep}[args.command]
        return handler(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
