"""Command-line entry point: ``pasnet {gen-data|train|cv|ablate|sweep|eval|gradcheck}``.

Settings come from built-in defaults, then an optional ``--config`` JSON
file, then explicit flags. Every command that writes outputs also writes the
fully resolved settings to ``<out>/config.json``; feeding that file back via
``--config`` repeats the run.

Exit codes: 0 success, 2 usage or invalid settings, 3 I/O or file format
failure, 4 numeric failure (aborted training, failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from .checks import OP_CASES, TOLERANCE, run_suite
from .dataset import SampleFormatError, generate_dataset, load_dataset, stratified_kfold
from .model import CLASS_NAMES, CheckpointError, load_checkpoint, save_checkpoint
from .tensor import NonFiniteError
from .trainer import (BRANCH_COLUMNS, LAMBDA_COLUMNS, TrainConfig, TrainingAborted, ablate_branch, cross_validate,
                      evaluate, sweep_lambda, train_fold, write_cv_outputs, write_table)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("pasnet")

TRAIN_FIELDS = [f.name for f in fields(TrainConfig)]


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> List[float]:
    try:
        return [float(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON settings file; explicit flags override it")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--out", type=Path, help="output directory" + ("" if out_required else " (optional)"))


def _add_train(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, help="dataset directory holding manifest.json")
    p.add_argument("--hw", type=int, help="resize volumes to hw x hw on load")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda", dest="lam", type=float, help="segmentation loss weight")
    p.add_argument("--gamma", type=float)
    p.add_argument("--lr-step-epochs", dest="lr_step_epochs", type=int)
    p.add_argument("--k-folds", dest="k_folds", type=int)
    p.add_argument("--n-f", dest="n_f", type=int, help="base filter count")
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--parallel-folds", dest="parallel_folds", type=int)
    p.add_argument("--no-decoder", dest="with_decoder", action="store_const", const=False,
                   help="build the classification backbone only")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pasnet", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a phantom dataset")
    _add_common(p)
    p.add_argument("--counts", type=_int_list, help="samples per class, e.g. 10,10,10,10")
    p.add_argument("--hw", type=int, help="slice height and width (default 64)")
    p.add_argument("--n-in", dest="n_in", type=int, help="slices per volume (default 10)")

    p = sub.add_parser("train", help="train one model on the whole dataset")
    _add_common(p)
    _add_train(p)

    p = sub.add_parser("cv", help="stratified k-fold cross-validation")
    _add_common(p)
    _add_train(p)

    p = sub.add_parser("ablate", help="backbone vs backbone + segmentation branch")
    _add_common(p)
    _add_train(p)

    p = sub.add_parser("sweep", help="cross-validate over several lambda values")
    _add_common(p)
    _add_train(p)
    p.add_argument("--lambdas", type=_float_list, help="comma-separated values (default 0.5,0.9,1.0)")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _add_common(p, out_required=False)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--hw", type=int, help="resize volumes to hw x hw on load")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _add_common(p, out_required=False)
    p.add_argument("--ops", help="'all' or comma-separated op names; 'model' is the end-to-end loss")
    p.add_argument("--instances", type=int, help="random instances per op (default 20)")
    return parser


DEFAULTS = {
    "gen-data": {"counts": [10, 10, 10, 10], "hw": 64, "n_in": 10, "seed": 0},
    "eval": {"seed": 0},
    "gradcheck": {"ops": "all", "instances": 20, "seed": 0},
    "sweep": {"lambdas": [0.5, 0.9, 1.0]},
}


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the JSON config file and explicit flags (flags win)."""
    cmd = args.command
    settings = {}
    if cmd in ("train", "cv", "ablate", "sweep"):
        settings.update(asdict(TrainConfig()))
        settings.update({"data": None, "hw": None})
    settings.update(DEFAULTS.get(cmd, {}))
    if args.config is not None:
        try:
            loaded = json.loads(args.config.read_text())
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        settings.update({k: v for k, v in loaded.items() if k != "command"})
    for key, val in vars(args).items():
        if key in ("command", "config", "verbose") or val is None:
            continue
        settings[key] = str(val) if isinstance(val, Path) else val
    settings["command"] = cmd
    return settings


def train_config(s: dict) -> TrainConfig:
    unknown = [k for k in s if k not in TRAIN_FIELDS and k not in ("data", "hw", "out", "command", "lambdas")]
    if unknown:
        raise UsageError(f"unknown settings: {', '.join(sorted(unknown))}")
    try:
        return TrainConfig(**{k: s[k] for k in TRAIN_FIELDS if k in s})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _require(s: dict, *keys: str) -> None:
    missing = [k for k in keys if s.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _out_dir(s: dict) -> Path:
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(s: dict, out: Path) -> None:
    (out / "config.json").write_text(json.dumps(s, indent=1, sort_keys=True) + "\n")


def _load(s: dict):
    hw = s.get("hw")
    if hw is not None and (hw < 32 or hw % 32):
        raise UsageError(f"--hw must be a positive multiple of 32, got {hw}")
    try:
        return load_dataset(s["data"], hw)
    except (KeyError, ValueError) as exc:
        # malformed manifests and sample files are file-format failures
        raise SampleFormatError(f"{s['data']}: {exc}") from exc


def cmd_gen_data(s: dict) -> int:
    _require(s, "out")
    counts = s["counts"]
    if len(counts) != len(CLASS_NAMES) or min(counts) < 0:
        raise UsageError(f"--counts needs four non-negative integers, got {counts}")
    if s["hw"] < 32 or s["n_in"] < 1:
        raise UsageError(f"--hw must be at least 32 and --n-in at least 1, got {s['hw']} and {s['n_in']}")
    out = _out_dir(s)
    m = generate_dataset(counts, (s["n_in"], s["hw"], s["hw"]), s["seed"], out)
    _snapshot(s, out)
    print(f"wrote {len(m.records)} samples ({m.n_in}x{m.height}x{m.width}) to {out}")
    for name, c in zip(CLASS_NAMES, m.counts):
        print(f"  {name:8s} {c}")
    return EXIT_OK


def cmd_train(s: dict) -> int:
    _require(s, "data", "out")
    cfg = train_config(s)
    data = _load(s)
    out = _out_dir(s)
    _snapshot(s, out)
    try:
        net, rec = train_fold(data, np.arange(len(data)), None, cfg)
    except TrainingAborted as exc:
        (out / "run.json").write_text(json.dumps(exc.record.to_dict(), indent=1, default=float) + "\n")
        raise NumericFailure(str(exc)) from exc
    save_checkpoint(net, out / "model.pasw")
    (out / "run.json").write_text(json.dumps(rec.to_dict(), indent=1, default=float) + "\n")
    last = rec.epochs[-1]
    print(f"trained {cfg.epochs} epochs in {rec.wall_clock:.1f}s; final loss {last['loss']:.4f}")
    return EXIT_OK


def cmd_cv(s: dict) -> int:
    _require(s, "data", "out")
    cfg = train_config(s)
    data = _load(s)
    out = _out_dir(s)
    _snapshot(s, out)
    res = cross_validate(data, cfg, out_dir=out)
    for f in res.report.folds:
        print(f"fold {f.fold}: " + ("failed" if f.failed else f"auc {f.auc:.5f} accuracy {f.accuracy:.5f}"))
    print(f"mean: auc {res.report.mean_auc:.5f} accuracy {res.report.mean_accuracy:.5f}")
    if res.report.warning:
        raise NumericFailure("one or more folds aborted; see run.json")
    return EXIT_OK


def _print_table(rows, columns) -> None:
    print(" | ".join(columns))
    for r in rows:
        print(" | ".join(f"{r[c]:.5f}" if isinstance(r[c], float) else str(r[c]) for c in columns))


def cmd_ablate(s: dict) -> int:
    _require(s, "data", "out")
    cfg = train_config(s)
    data = _load(s)
    out = _out_dir(s)
    _snapshot(s, out)
    plan = stratified_kfold(data.labels, cfg.k_folds, cfg.seed)
    rows, results = ablate_branch(data, cfg, plan)
    write_table(rows, BRANCH_COLUMNS, out / "ablation.csv")
    for name, res in results.items():
        write_cv_outputs(res, out / name)
    _print_table(rows, BRANCH_COLUMNS)
    if any(r.report.warning for r in results.values()):
        raise NumericFailure("one or more folds aborted")
    return EXIT_OK


def cmd_sweep(s: dict) -> int:
    _require(s, "data", "out")
    cfg = train_config(s)
    lambdas = s["lambdas"]
    if not lambdas or any(not (x >= 0) for x in lambdas):
        raise UsageError(f"--lambdas must be non-negative, got {lambdas}")
    data = _load(s)
    out = _out_dir(s)
    _snapshot(s, out)
    plan = stratified_kfold(data.labels, cfg.k_folds, cfg.seed)
    rows, results = sweep_lambda(data, cfg, lambdas, plan)
    write_table(rows, LAMBDA_COLUMNS, out / "lambda_sweep.csv")
    for lam, res in results.items():
        write_cv_outputs(res, out / f"lambda_{lam:g}")
    _print_table(rows, LAMBDA_COLUMNS)
    if any(r.report.warning for r in results.values()):
        raise NumericFailure("one or more folds aborted")
    return EXIT_OK


EVAL_COLUMNS = ("n", "auc", "accuracy", "dice", *(f"auc_{c}" for c in CLASS_NAMES))


def cmd_eval(s: dict) -> int:
    _require(s, "checkpoint", "data")
    data = _load(s)
    n_in, hw, _ = data.geometry
    try:
        m = load_checkpoint(s["checkpoint"], hw)
    except KeyError as exc:
        raise CheckpointError(f"{s['checkpoint']}: missing tensor {exc}") from exc
    if n_in != m.config.n_in:
        raise UsageError(f"checkpoint expects {m.config.n_in} slices, dataset has {n_in}")
    ev = evaluate(m, data)
    row = {"n": len(data), "auc": ev["auc"], "accuracy": ev["accuracy"], "dice": ev.get("dice", ""),
           **{f"auc_{c}": ("" if a is None else a) for c, a in zip(CLASS_NAMES, ev["class_auc"])}}
    if s.get("out"):
        out = _out_dir(s)
        _snapshot(s, out)
        with open(out / "eval.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EVAL_COLUMNS)
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in EVAL_COLUMNS])
    print(", ".join(f"{c}={row[c]:.5f}" if isinstance(row[c], float) else f"{c}={row[c]}" for c in EVAL_COLUMNS))
    return EXIT_OK


def cmd_gradcheck(s: dict) -> int:
    ops = s["ops"]
    names = list(OP_CASES) + ["model"] if ops == "all" else [o.strip() for o in ops.split(",") if o.strip()]
    unknown = [n for n in names if n not in OP_CASES and n != "model"]
    if unknown or not names:
        raise UsageError(f"unknown ops {unknown}; choose from {', '.join(list(OP_CASES) + ['model'])}")
    if s["instances"] < 1:
        raise UsageError("--instances must be positive")
    results = run_suite(names, seed=s["seed"], instances=s["instances"], include_model="model" in names)
    failed = 0
    for name, err in results.items():
        ok = err < TOLERANCE
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name} max_rel_err={err:.3e}")
    if s.get("out"):
        out = _out_dir(s)
        _snapshot(s, out)
        (out / "gradcheck.json").write_text(json.dumps(results, indent=1, sort_keys=True) + "\n")
    if failed:
        raise NumericFailure(f"{failed} gradient check(s) above tolerance {TOLERANCE}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "cv": cmd_cv,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](resolve(args))
    except UsageError as exc:
        print(f"pasnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, SampleFormatError, CheckpointError) as exc:
        print(f"pasnet: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericFailure, NonFiniteError) as exc:
        print(f"pasnet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
