"""Command-line front end.

Exit codes: 0 success, 1 oracle check failure, 2 usage or config error,
3 I/O error, 4 numeric failure.

Settings resolve as built-in defaults, then the ``-c`` JSON config file
(flat kebab-case keys), then command-line flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import data, oracle
from .errors import (
    ConfigInvalid,
    DegenerateConfig,
    GeoflowError,
    InsufficientSamples,
    NonFiniteLoss,
    NonPositiveDensity,
    ParseError,
    SchemaMismatch,
    StepShrinkExhausted,
)
from .flow import FlowConfig, run_flow
from .model import ClassifierParams, PropagationConfig, evaluate, per_node_loss, propagate_features
from .trainer import BETA_GRID, METHODS, T_IN_GRID, TrainConfig, sweep, train, training_labels, worst_group_accuracy

log = logging.getLogger("geoflow")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4

# config key -> (type, default)
CONFIG_KEYS = {
    "data": (str, None),
    "out": (str, "."),
    "method": (str, "tar"),
    "epochs": (int, 200),
    "lr": (float, 0.5),
    "t-in": (int, 10),
    "beta": (float, 0.01),
    "tau": (float, 0.01),
    "hops": (int, 2),
    "self-loop-weight": (float, 1.0),
    "k": (int, 3),
    "seed": (int, 0),
    "eval-every": (int, 1),
    "impute-grad": (str, "on"),
    "q-warm-start": (str, "off"),
    "positivity-floor": (float, 1e-12),
    "max-step-shrinks": (int, 40),
    "select-metric": (str, "acc"),
    "t-in-grid": (str, ",".join(str(t) for t in T_IN_GRID)),
    "beta-grid": (str, ",".join(repr(b) for b in BETA_GRID)),
    "jobs": (int, 1),
}


class UsageError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("GEOFLOW_LOG", "error").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        level = "ERROR"
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _switch(name: str, value: str) -> bool:
    if value not in ("on", "off"):
        raise UsageError(f"--{name} must be 'on' or 'off', got {value!r}")
    return value == "on"


def _parse_grid(name: str, text: str, cast):
    try:
        values = [cast(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--{name} must be a comma-separated list, got {text!r}") from None
    if not values:
        raise UsageError(f"--{name} must not be empty")
    return values


def resolve_config(args) -> dict:
    """Merge defaults, the optional JSON config file and explicit flags."""
    cfg = {k: default for k, (_, default) in CONFIG_KEYS.items()}
    base_dir = Path.cwd()
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(raw) - set(CONFIG_KEYS))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in raw.items():
            typ = CONFIG_KEYS[key][0]
            if typ is str and isinstance(value, bool):
                value = "on" if value else "off"
            try:
                cfg[key] = typ(value)
            except (TypeError, ValueError):
                raise UsageError(f"config key {key!r}: cannot read {value!r} as {typ.__name__}") from None
        base_dir = path.parent
    from_file = set()
    if getattr(args, "config", None):
        from_file = {k for k in ("data", "out") if k in raw}
    for key in CONFIG_KEYS:
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            cfg[key] = value
            from_file.discard(key)
    # paths from the config file are relative to the file, flag paths to the cwd
    for key in ("data", "out"):
        if cfg[key] is not None:
            root = base_dir if key in from_file else Path.cwd()
            cfg[key] = str((root / cfg[key]).resolve())
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    try:
        flow_cfg = FlowConfig(beta=cfg["beta"], tau=cfg["tau"], t_in=cfg["t-in"],
                              positivity_floor=cfg["positivity-floor"], max_step_shrinks=cfg["max-step-shrinks"])
        return TrainConfig(
            epochs=cfg["epochs"], gamma=cfg["lr"], flow=flow_cfg,
            prop=PropagationConfig(hops=cfg["hops"], self_loop_weight=cfg["self-loop-weight"]),
            method=cfg["method"], k=cfg["k"], seed=cfg["seed"], eval_every=cfg["eval-every"],
            impute_grad=_switch("impute-grad", cfg["impute-grad"]),
            q_warm_start=_switch("q-warm-start", cfg["q-warm-start"]),
            select_metric=cfg["select-metric"],
        )
    except (ValueError, ConfigInvalid) as exc:
        raise UsageError(str(exc)) from None


def _load(path) -> data.Dataset:
    if path is None:
        raise UsageError("no dataset given (use --data or the 'data' config key)")
    return data.load_dataset(path)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _params_json(params: ClassifierParams, prop: PropagationConfig) -> dict:
    return dict(params.to_json(), hops=prop.hops, self_loop_weight=prop.self_loop_weight)


def _load_params(path) -> tuple[ClassifierParams, PropagationConfig]:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.colno, exc.msg) from None
    if not isinstance(obj, dict) or "weight" not in obj or "bias" not in obj:
        raise SchemaMismatch(f"{path}: params file needs 'weight' and 'bias'")
    prop = PropagationConfig(hops=int(obj.get("hops", 0)), self_loop_weight=float(obj.get("self_loop_weight", 1.0)))
    return ClassifierParams.from_json(obj), prop


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.n < 2:
        raise UsageError("--n must be >= 2")
    if args.classes < 2:
        raise UsageError("--classes must be >= 2")
    if not 0.0 <= args.spurious <= 1.0:
        raise UsageError(f"--spurious must lie in [0, 1], got {args.spurious}")
    if args.ratio < 1:
        raise UsageError(f"--ratio must be >= 1, got {args.ratio}")
    kind = args.base if args.kind == "imbalance" else args.kind
    d = args.d if args.d is not None else (args.classes + 1 if kind == "covariate" else 3)
    try:
        if kind == "covariate":
            ds = data.gen_covariate_shift(args.seed, args.n, d, args.classes, args.shift)
        else:
            ds = data.gen_concept_shift(args.seed, args.n, d, args.classes, args.spurious)
        if args.kind == "imbalance":
            ds = data.gen_class_imbalance(args.seed, ds, args.ratio)
    except (DegenerateConfig, InsufficientSamples) as exc:
        raise UsageError(str(exc)) from None
    written = data.save_dataset(ds, _out_dir(args.out))
    print(json.dumps({"files": [p.name for p in written], "num_nodes": ds.num_nodes,
                      "num_edges": ds.graph.num_edges, **ds.meta}))
    return EXIT_OK


def _summary(report, stamp: bool, started: str) -> dict:
    out = report.summary()
    if stamp:
        out["run_started"] = started
        out["timings"] = report.timings
    return out


def cmd_train(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    cfg = resolve_config(args)
    tcfg = train_config(cfg)
    ds = _load(cfg["data"])
    report = train(ds.graph, ds.features, ds.labels, ds.masks, tcfg, groups=ds.groups)
    out = _out_dir(cfg["out"])
    with open(out / "report.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for rec in report.records:
            fh.write(json.dumps(rec) + "\n")
            val = rec["val"]["acc"] if rec["val"] else float("nan")
            test = rec["test"]["acc"] if rec["test"] else float("nan")
            print(f"epoch {rec['epoch']:4d}  loss {rec['train_loss_weighted']:.4f}  "
                  f"val {val:.4f}  test {test:.4f}  gw2 {rec['cumulative_gw2']:.3g}")
    _write_json(out / "summary.json", _summary(report, not args.no_timestamps, started))
    _write_json(out / "params.json", _params_json(report.best_params, tcfg.prop))
    return EXIT_OK


def _read_loss_file(path, n: int) -> np.ndarray:
    path = Path(path)
    loss = np.full(n, np.nan)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["node_id", "loss"]:
            raise ParseError(path, 1, 1, f"expected header 'node_id,loss', got {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                i, value = int(row[0]), float(row[1])
            except (ValueError, IndexError):
                raise ParseError(path, lineno, 1, f"row {lineno}: expected 'node_id,loss'") from None
            if not 0 <= i < n:
                raise ParseError(path, lineno, 1, f"row {lineno}: node id {i} outside [0, {n})")
            loss[i] = value
    if np.isnan(loss).any():
        raise SchemaMismatch(f"{path} has no loss for {int(np.isnan(loss).sum())} nodes")
    return loss


def cmd_flow(args) -> int:
    if (args.params is None) == (args.loss_file is None):
        raise UsageError("give exactly one of --params or --loss-file")
    if args.trace_every < 1:
        raise UsageError("--trace-every must be >= 1")
    ds = _load(args.data)
    if args.params is not None:
        params, prop = _load_params(args.params)
        h = propagate_features(ds.features, ds.graph, prop)
        loss = per_node_loss(params, h, training_labels(ds.labels, ds.masks["train"]))
    else:
        loss = _read_loss_file(args.loss_file, ds.num_nodes)
    try:
        fcfg = FlowConfig(beta=args.beta, tau=args.tau, t_in=args.t_in)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    trace = run_flow(None, loss, ds.graph, fcfg)
    out = _out_dir(args.out)
    trace.write_csv(out / "trace.csv", every=args.trace_every)
    with open(out / "actions.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "step_action", "effective_tau", "free_energy"])
        for step, (a, t, f) in enumerate(zip(trace.step_actions, trace.effective_taus, trace.free_energies[1:]), 1):
            w.writerow([step, repr(a), repr(t), repr(f)])
    trace.write_summary(out / "flow_summary.json")
    print(json.dumps({"cumulative_gw2": trace.cumulative_gw2, "steps": fcfg.t_in,
                      "q_max": float(trace.final.max()), "q_min": float(trace.final.min())}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    tcfg = train_config(cfg)
    t_grid = _parse_grid("t-in-grid", cfg["t-in-grid"], int)
    b_grid = _parse_grid("beta-grid", cfg["beta-grid"], float)
    if any(t < 0 for t in t_grid) or any(b < 0 for b in b_grid):
        raise UsageError("grid values must be non-negative")
    if tcfg.method == "kl-tilt" and any(b <= 0 for b in b_grid):
        raise UsageError("kl-tilt needs every beta in --beta-grid to be > 0")
    ds = _load(cfg["data"])
    cells = sweep(ds.graph, ds.features, ds.labels, ds.masks, tcfg, t_grid, b_grid,
                  groups=ds.groups, jobs=cfg["jobs"])
    out = _out_dir(cfg["out"])
    fields = ["t_in", "beta", "val_metric", "test_metric", "worst_group"]
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for cell in cells:
            row = cell.row()
            w.writerow({k: ("" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k])
                        for k in fields})
            print(f"t_in {row['t_in']:4d}  beta {row['beta']:<6g}  val {row['val_metric']:.4f}  "
                  f"test {row['test_metric']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = _load(args.data)
    params, prop = _load_params(args.params)
    h = propagate_features(ds.features, ds.graph, prop)
    result = {}
    for name in args.mask:
        if ds.masks[name].size:
            result[name] = evaluate(params, h, ds.labels, ds.masks[name]).as_dict()
    if ds.groups:
        result["worst_group_acc"] = worst_group_accuracy(params, h, ds.labels, ds.groups)
    text = json.dumps(result, indent=2)
    print(text)
    if args.out:
        (_out_dir(args.out) / "eval.json").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_check(args) -> int:
    report = oracle.run_checks(args.selector, seed=args.seed, timings=not args.no_timestamps)
    failed = [name for name, res in report.items() if not res["passed"]]
    payload = {"selector": args.selector, "passed": not failed, "failed": failed, "checks": report}
    text = json.dumps(payload, indent=2)
    print(text)
    if args.out:
        (_out_dir(args.out) / "check.json").write_text(text + "\n", encoding="utf-8")
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="JSON config file with kebab-case keys")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--t-in", type=int, help="inner flow steps")
    p.add_argument("--beta", type=float, help="entropy coefficient")
    p.add_argument("--tau", type=float, help="flow time step")
    p.add_argument("--hops", type=int)
    p.add_argument("--self-loop-weight", type=float)
    p.add_argument("--k", type=int, help="shortcut edges per labeled node for tar-n")
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--impute-grad", choices=("on", "off"))
    p.add_argument("--q-warm-start", choices=("on", "off"))
    p.add_argument("--positivity-floor", type=float)
    p.add_argument("--max-step-shrinks", type=int)
    p.add_argument("--select-metric", choices=("acc", "balanced_acc", "macro_f1", "roc_auc"))
    p.add_argument("--no-timestamps", action="store_true", help="omit run_started and timings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geoflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic shift dataset")
    p.add_argument("kind", choices=("covariate", "concept", "imbalance"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=200, help="nodes per domain")
    p.add_argument("--d", type=int, help="feature dimension")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--shift", type=float, default=1.0, help="covariate shift magnitude")
    p.add_argument("--spurious", type=float, default=0.9, help="spurious strength for concept shift")
    p.add_argument("--ratio", type=float, default=100.0, help="imbalance ratio")
    p.add_argument("--base", choices=("covariate", "concept"), default="covariate",
                   help="generator underlying 'imbalance'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("flow", help="run the reweighting flow on fixed losses")
    p.add_argument("--data", required=True)
    p.add_argument("--params", help="params.json to compute losses from")
    p.add_argument("--loss-file", help="CSV with node_id,loss")
    p.add_argument("--t-in", type=int, default=10)
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--trace-every", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("sweep", help="grid over t_in and beta")
    _add_train_flags(p)
    p.add_argument("--t-in-grid", help="comma-separated t_in values")
    p.add_argument("--beta-grid", help="comma-separated beta values")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate saved params")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--mask", nargs="+", choices=data.MASK_NAMES, default=list(data.MASK_NAMES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="run the oracle battery")
    p.add_argument("selector", nargs="?", default="all", choices=oracle.SELECTORS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--no-timestamps", action="store_true")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"geoflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StepShrinkExhausted, NonFiniteLoss, NonPositiveDensity) as exc:
        print(f"geoflow {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ParseError, SchemaMismatch) as exc:
        print(f"geoflow {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (GeoflowError, ValueError) as exc:
        print(f"geoflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    log.info("%s finished in %.2fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
