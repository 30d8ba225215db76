"""Command-line entry point: train, eval, baseline, sweep, compare.

Configuration lives in one JSON file mirroring DEFAULT_CONFIG below; every
value can also be set from the command line with repeatable
``--override dotted.path=value`` flags. All randomness flows from the single
root seed, and every artifact embeds the resolved configuration, the seed,
and a format version, so any output is reproducible from its own header.

Exit codes: 0 success, 2 configuration error, 3 runtime abort, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import os
import sys

from .checkpoint import load_checkpoint
from .evaluation import (
    EvalReport,
    NetMechanism,
    RandomMatchingMechanism,
    TradeReductionMechanism,
    evaluate_mechanism,
    sweep,
)
from .fileio import write_history_csv, write_json_atomic, write_text_atomic
from .market import MarketConfig
from .nets import ArchConfig
from .training import TrainConfig, TrainingAbort, train

FORMAT_VERSION = 1

DEFAULT_CONFIG = {
    "format_version": FORMAT_VERSION,
    "seed": 0,
    "out": "runs/default",
    "market": {
        "m_range": [1, 10],
        "n_range": [1, 10],
        "value_low": 0.1,
        "value_high": 1.0,
        "quantity_low": 1.0,
        "quantity_high": 10.0,
    },
    "model": {"encoder": "attention", "hidden": 256, "layers": 4, "heads": 4},
    "train": {
        "consumer_weight": 0.5,
        "supplier_weight": 0.5,
        "probe_rate": 1e-3,
        "update_rate": 1e-4,
        "probe_steps": 20,
        "epochs": 300,
        "updates_per_epoch": 40,
        "batch_size": 32,
        "gce_enabled": True,
        "ic_mode": "adversarial",
        "rsic_sample_count": 20,
        "checkpoint_every": 0,
    },
    "eval": {
        "profit_samples": 10000,
        "ic_profiles": 1000,
        "grid_points": 16,
        "refine_steps": 0,
        "m": None,
        "n": None,
    },
}


class ConfigError(ValueError):
    pass


def _merge_checked(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        here = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge_checked(base[key], value, here + ".")
        else:
            base[key] = value


def _apply_override(config: dict, spec: str) -> None:
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} is not of the form path=value")
    path, raw = spec.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = path.split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key: {path}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key: {path}")
    node[parts[-1]] = value


def load_config(args) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if args.config is not None:
        try:
            with open(args.config) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        _merge_checked(config, user)
    for spec in args.override or []:
        _apply_override(config, spec)
    if args.seed is not None:
        config["seed"] = args.seed
    if args.out is not None:
        config["out"] = args.out
    if getattr(args, "samples", None) is not None:
        config["eval"]["profit_samples"] = args.samples
    if getattr(args, "grid", None) is not None:
        config["eval"]["grid_points"] = args.grid
    if getattr(args, "no_gce", False):
        config["train"]["gce_enabled"] = False
    if getattr(args, "ic_mode", None) is not None:
        config["train"]["ic_mode"] = args.ic_mode
    if getattr(args, "encoder", None) is not None:
        config["model"]["encoder"] = args.encoder
    return config


def _market_config(config: dict, pin_eval_size: bool = False) -> MarketConfig:
    m = config["market"]
    try:
        cfg = MarketConfig(
            m_range=tuple(m["m_range"]),
            n_range=tuple(m["n_range"]),
            value_low=m["value_low"],
            value_high=m["value_high"],
            quantity_low=m["quantity_low"],
            quantity_high=m["quantity_high"],
            seed=config["seed"],
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"market: {exc}") from exc
    if pin_eval_size and config["eval"]["m"] is not None:
        cfg = cfg.with_sizes(int(config["eval"]["m"]), int(config["eval"]["n"] or config["eval"]["m"]))
    return cfg


def _train_config(config: dict) -> TrainConfig:
    model, tr = config["model"], config["train"]
    try:
        return TrainConfig(
            market=_market_config(config),
            arch=ArchConfig(hidden=model["hidden"], layers=model["layers"], heads=model["heads"]),
            encoder_kind=model["encoder"],
            consumer_weight=tr["consumer_weight"],
            supplier_weight=tr["supplier_weight"],
            probe_rate=tr["probe_rate"],
            update_rate=tr["update_rate"],
            probe_steps=tr["probe_steps"],
            epochs=tr["epochs"],
            updates_per_epoch=tr["updates_per_epoch"],
            batch_size=tr["batch_size"],
            seed=config["seed"],
            gce_enabled=tr["gce_enabled"],
            ic_mode=tr["ic_mode"],
            rsic_sample_count=tr["rsic_sample_count"],
            checkpoint_every=tr["checkpoint_every"],
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _metrics_payload(config: dict, command: str, report: EvalReport) -> dict:
    body = dataclasses.asdict(report)
    body["m_range"] = list(body["m_range"])
    body["n_range"] = list(body["n_range"])
    return {
        "format_version": FORMAT_VERSION,
        "command": command,
        "seed": config["seed"],
        "config": config,
        "report": body,
    }


def cmd_train(args) -> int:
    config = load_config(args)
    cfg = _train_config(config)
    out = config["out"]
    os.makedirs(out, exist_ok=True)
    try:
        model, history = train(cfg, checkpoint_dir=out)
    except TrainingAbort as exc:
        write_history_csv(os.path.join(out, "history.csv"), exc.history)
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    write_history_csv(os.path.join(out, "history.csv"), history)
    write_json_atomic(os.path.join(out, "config.resolved.json"), config)
    print(f"trained {cfg.epochs} epochs; artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    config = load_config(args)
    try:
        model, _ = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        print(f"checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return 4
    market = _market_config(config, pin_eval_size=True)
    ev = config["eval"]
    report = evaluate_mechanism(
        NetMechanism(model), market,
        profit_samples=ev["profit_samples"], ic_profiles=ev["ic_profiles"],
        grid_points=ev["grid_points"], refine_steps=ev["refine_steps"],
    )
    out = os.path.join(config["out"], "metrics.json")
    write_json_atomic(out, _metrics_payload(config, "eval", report))
    print(f"profit {report.profit_mean:.4f} ic_c {report.ic_consumer:.4f} "
          f"ic_s {report.ic_supplier:.4f} -> {out}")
    return 0


def cmd_baseline(args) -> int:
    config = load_config(args)
    if args.kind == "trm":
        mechanism = TradeReductionMechanism()
    elif args.kind == "rm":
        mechanism = RandomMatchingMechanism(seed=config["seed"])
    else:
        print(f"unknown baseline {args.kind!r}; valid kinds: trm, rm", file=sys.stderr)
        return 2
    market = _market_config(config, pin_eval_size=True)
    ev = config["eval"]
    report = evaluate_mechanism(
        mechanism, market,
        profit_samples=ev["profit_samples"], ic_profiles=ev["ic_profiles"],
        grid_points=ev["grid_points"],
    )
    out = os.path.join(config["out"], f"metrics-{args.kind}.json")
    write_json_atomic(out, _metrics_payload(config, "baseline", report))
    print(f"{args.kind} profit {report.profit_mean:.4f} ic_c {report.ic_consumer:.4f} "
          f"ic_s {report.ic_supplier:.4f} -> {out}")
    return 0


def cmd_sweep(args) -> int:
    config = load_config(args)
    try:
        values = json.loads(args.values)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--values: {exc.msg}") from exc
    if not isinstance(values, list) or not values:
        raise ConfigError("--values must be a nonempty JSON list")
    cfg = _train_config(config)
    market = _market_config(config, pin_eval_size=True)
    if market.m_range[0] != market.m_range[1]:
        market = market.with_sizes(10, 8)
    try:
        results = sweep(cfg, args.param, values, market,
                        profit_samples=config["eval"]["profit_samples"],
                        ic_profiles=config["eval"]["ic_profiles"],
                        grid_points=config["eval"]["grid_points"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = config["out"]
    os.makedirs(out, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "command": "sweep",
        "seed": config["seed"],
        "config": config,
        "param": args.param,
        "results": [
            {"value": value, "report": _metrics_payload(config, "sweep", report)["report"]}
            for value, report in results
        ],
    }
    write_json_atomic(os.path.join(out, "sweep.json"), payload)
    lines = [f"{args.param}\tprofit\tic_consumer\tic_supplier"]
    for value, report in results:
        lines.append(f"{value}\t{report.profit_mean:.4f}\t{report.ic_consumer:.4f}"
                     f"\t{report.ic_supplier:.4f}")
    table = "\n".join(lines) + "\n"
    write_text_atomic(os.path.join(out, "sweep.tsv"), table)
    print(table, end="")
    return 0


def cmd_compare(args) -> int:
    rows = []
    for path in args.metrics:
        try:
            with open(path) as fh:
                payload = json.load(fh)
        except FileNotFoundError:
            print(f"metrics file not found: {path}", file=sys.stderr)
            return 4
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        r = payload.get("report", {})
        rows.append((r.get("mechanism", "?"), r.get("m_range", ["?"])[0],
                     r.get("n_range", ["?"])[0], r.get("profit_mean", float("nan")),
                     r.get("ic_consumer", float("nan")), r.get("ic_supplier", float("nan"))))
    header = f"{'mechanism':<12}{'m':>4}{'n':>4}{'profit':>10}{'ic_c':>10}{'ic_s':>10}"
    lines = [header]
    for mech, m, n, profit, ic_c, ic_s in rows:
        lines.append(f"{mech:<12}{m:>4}{n:>4}{profit:>10.4f}{ic_c:>10.4f}{ic_s:>10.4f}")
    table = "\n".join(lines) + "\n"
    if args.out is not None:
        write_text_atomic(args.out, table)
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="damech",
                                     description="learned double-auction mechanisms")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, samples=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="root seed override")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--override", action="append", metavar="PATH=VALUE",
                       help="dotted config override, repeatable")
        if samples:
            p.add_argument("--samples", type=int, help="profit sample count")
            p.add_argument("--grid", type=int, help="IC grid points per axis")

    p = sub.add_parser("train", help="run the training loop")
    common(p)
    p.add_argument("--no-gce", action="store_true", help="disable conflict elimination")
    p.add_argument("--ic-mode", choices=["adversarial", "random_sampling"])
    p.add_argument("--encoder", choices=["attention", "mlp"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, samples=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="evaluate a classical mechanism")
    common(p, samples=True)
    p.add_argument("--kind", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("sweep", help="train/evaluate across one parameter")
    common(p, samples=True)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="JSON list of values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="join metrics files into one table")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingAbort as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
