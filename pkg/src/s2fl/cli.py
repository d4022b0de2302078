"""Command line: ``run``, ``sweep`` and ``oracle`` subcommands.

Configs are INI files read with :mod:`configparser`::

    [experiment]
    include = base.ini        ; optional, loaded first, this file overrides
    output_dir = results
    repeats = 3               ; seeds base.seed .. base.seed + repeats - 1
    target_accuracy = 0.8

    [run]
    mode = s2fl
    alpha = 0.1               ; or "iid"
    hidden = 64, 64, 64

    [sweep]
    mode = s2fl, sfl_vanilla
    alpha = 0.1, 0.5, iid

``S2FL_OUTPUT_DIR`` overrides ``output_dir``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import itertools
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, S2FLError
from .main_server import group_exhaustive
from .oracles import aggregation_oracle, brute_force_grouping
from .orchestrator import RoundMetrics, RunConfig, Simulation

OUTPUT_ENV = "S2FL_OUTPUT_DIR"
METRICS_COLUMNS = ["round", "accuracy", "loss", "cum_seconds", "cum_bytes", "splits", "groups"]
RUN_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
TUPLE_FIELDS = {"hidden", "split_candidates"}
OPTIONAL_FIELDS = {"alpha", "time_ema"}


@dataclass
class ExperimentConfig:
    base: RunConfig
    sweep: list = field(default_factory=list)  # [(field, [values]), ...]
    output_dir: Path = Path("results")
    repeats: int = 1
    target_accuracy: Optional[float] = None

    def runs(self) -> list[RunConfig]:
        names = [name for name, _ in self.sweep]
        configs = []
        for combo in itertools.product(*(values for _, values in self.sweep)):
            cfg = self.base.replace(**dict(zip(names, combo)))
            for r in range(self.repeats):
                configs.append(cfg.replace(seed=self.base.seed + r))
        return configs


# --- parsing ---------------------------------------------------------------


def parse_value(name: str, text: str):
    """Convert a config string to the type of RunConfig field ``name``."""
    if name not in RUN_FIELDS:
        raise ConfigError(f"{name}: not a run setting")
    text = text.strip()
    default = RUN_FIELDS[name].default
    try:
        if name in OPTIONAL_FIELDS and text.lower() in ("iid", "none", ""):
            return None
        if name in TUPLE_FIELDS:
            return tuple(int(v) for v in text.split(",") if v.strip())
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "on", "yes", "1"):
                return True
            if low in ("false", "off", "no", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or name in OPTIONAL_FIELDS:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r}") from None


def _read_layers(path: Path, seen: tuple = ()) -> configparser.ConfigParser:
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"include: cycle through {path}")
    if not path.exists():
        raise ConfigError(f"include: no such file {path}")
    own = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    own.read(path)
    merged = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    include = own.get("experiment", "include", fallback=None)
    if include:
        merged.read_dict(_read_layers(path.parent / include, seen + (path,)))
    merged.read_dict(own)
    for section in merged.sections():
        if section not in ("experiment", "run", "sweep"):
            raise ConfigError(f"[{section}]: unknown section")
    return merged


def load_config(path) -> ExperimentConfig:
    parser = _read_layers(Path(path))
    run = {}
    if parser.has_section("run"):
        for key, text in parser.items("run"):
            run[key] = parse_value(key, text)
    try:
        base = RunConfig(**run)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None

    sweep = []
    if parser.has_section("sweep"):
        for key, text in parser.items("sweep"):
            if key == "seed":
                raise ConfigError("sweep.seed: use repeats to vary seeds")
            values = [parse_value(key, v) for v in text.split(",")] if key not in TUPLE_FIELDS else \
                [parse_value(key, v) for v in text.split(";")]
            if not values:
                raise ConfigError(f"sweep.{key}: empty value list")
            sweep.append((key, values))

    exp = parser["experiment"] if parser.has_section("experiment") else {}
    known = {"include", "output_dir", "repeats", "target_accuracy"}
    for key in exp:
        if key not in known:
            raise ConfigError(f"{key}: unknown experiment setting")
    try:
        repeats = int(exp.get("repeats", 1))
        target = exp.get("target_accuracy")
        target = float(target) if target not in (None, "") else None
    except ValueError as exc:
        raise ConfigError(f"repeats/target_accuracy: {exc}") from None
    if repeats < 1:
        raise ConfigError("repeats: must be >= 1")
    output_dir = os.environ.get(OUTPUT_ENV) or exp.get("output_dir", "results")
    config = ExperimentConfig(base, sweep, Path(output_dir), repeats, target)
    for cfg in config.runs():
        cfg.validate()
    return config


# --- metrics files -----------------------------------------------------------


def run_name(cfg: RunConfig) -> str:
    alpha = "iid" if cfg.alpha is None else f"{cfg.alpha:g}"
    return f"{cfg.mode}_a{alpha}_g{cfg.group_size}_{cfg.fleet}_s{cfg.seed}"


def write_metrics(history: Sequence[RoundMetrics], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for m in history:
            splits = json.dumps({str(k): v for k, v in sorted(m.split_assignment.items())}, separators=(",", ":"))
            groups = json.dumps([[list(g), float(d)] for g, d in m.grouping], separators=(",", ":"))
            writer.writerow([m.round, repr(m.test_accuracy), repr(m.global_loss),
                             repr(m.simulated_seconds), m.bytes, splits, groups])


def read_metrics(path) -> list[RoundMetrics]:
    history = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_COLUMNS:
            raise ValueError(f"{path}: expected columns {METRICS_COLUMNS}, got {reader.fieldnames}")
        for row in reader:
            history.append(RoundMetrics(
                round=int(row["round"]),
                test_accuracy=float(row["accuracy"]),
                global_loss=float(row["loss"]),
                simulated_seconds=float(row["cum_seconds"]),
                bytes=int(row["cum_bytes"]),
                split_assignment={int(k): v for k, v in json.loads(row["splits"]).items()},
                grouping=[(list(g), d) for g, d in json.loads(row["groups"])],
            ))
    return history


def first_reaching(history: Sequence[RoundMetrics], target: float | None):
    """(seconds, bytes) when accuracy first reaches ``target``, or (None, None)."""
    if target is not None:
        for m in history:
            if m.test_accuracy >= target:
                return m.simulated_seconds, m.bytes
    return None, None


def summarize(cfg: RunConfig, history: Sequence[RoundMetrics], target: float | None) -> dict:
    last = history[-1]
    seconds, sent = first_reaching(history, target)
    config = dataclasses.asdict(cfg)
    return {
        "final_accuracy": last.test_accuracy,
        "final_loss": last.global_loss,
        "total_seconds": last.simulated_seconds,
        "total_bytes": last.bytes,
        "target_accuracy": target,
        "seconds_to_target": seconds,
        "bytes_to_target": sent,
        "config": config,
    }


def execute(cfg: RunConfig, out_dir: Path, target: float | None) -> dict:
    sim = Simulation(cfg)
    for _ in range(cfg.rounds):
        sim.step()
    out_dir.mkdir(parents=True, exist_ok=True)
    name = run_name(cfg)
    write_metrics(sim.history, out_dir / f"{name}.csv")
    if len(sim.table):
        sim.table.to_csv(out_dir / f"{name}_time_table.csv")
    summary = summarize(cfg, sim.history, target)
    summary["metrics_file"] = f"{name}.csv"
    (out_dir / f"{name}_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def aggregate_rows(summaries: Sequence[dict], keys: Sequence[str]) -> list[dict]:
    """One row per setting (``keys`` of the config), statistics over seeds."""
    buckets: dict[tuple, list[dict]] = {}
    for s in summaries:
        key = tuple(json.dumps(s["config"][k]) for k in keys)
        buckets.setdefault(key, []).append(s)
    rows = []
    for key, group in buckets.items():
        acc = [s["final_accuracy"] for s in group]
        row = {k: group[0]["config"][k] for k in keys}
        if "alpha" in row and row["alpha"] is None:
            row["alpha"] = "iid"
        row.update({
            "runs": len(group),
            "final_accuracy_mean": float(np.mean(acc)),
            "final_accuracy_std": float(np.std(acc)),
            "reached_target": sum(s["seconds_to_target"] is not None for s in group),
            "seconds_to_target_mean": _mean(s["seconds_to_target"] for s in group),
            "bytes_to_target_mean": _mean(s["bytes_to_target"] for s in group),
        })
        rows.append(row)
    return rows


def write_aggregate(rows: Sequence[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if v is None else (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# --- subcommands ---------------------------------------------------------------


def cmd_run(args) -> int:
    config = load_config(args.config)
    if config.sweep:
        print("note: [sweep] is ignored by 'run'; use 'sweep'", file=sys.stderr)
    for r in range(config.repeats):
        cfg = config.base.replace(seed=config.base.seed + r)
        summary = execute(cfg, config.output_dir, config.target_accuracy)
        print(f"{run_name(cfg)}: accuracy {summary['final_accuracy']:.4f}, "
              f"{summary['total_seconds']:.1f} s simulated, {summary['total_bytes']} bytes")
    return 0


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    summaries = []
    for cfg in config.runs():
        summaries.append(execute(cfg, config.output_dir, config.target_accuracy))
        print(f"{run_name(cfg)}: accuracy {summaries[-1]['final_accuracy']:.4f}")
    keys = ["mode", "alpha"] + [name for name, _ in config.sweep if name not in ("mode", "alpha")]
    path = config.output_dir / "aggregate.csv"
    write_aggregate(aggregate_rows(summaries, keys), path)
    print(f"wrote {path}")
    return 0


def cmd_oracle_grouping(args) -> int:
    """Input JSON: {"client_id": [counts...], ...}."""
    data = json.loads(Path(args.input).read_text())
    hists = {k: np.asarray(v, dtype=float) for k, v in data.items()}
    total, groups = brute_force_grouping(hists, args.group_size)
    exact = group_exhaustive(hists, args.group_size)
    print(json.dumps({"brute_force_total": total, "brute_force_groups": groups,
                      "exhaustive_total": exact.total, "exhaustive_groups": exact.groups}, indent=2))
    return 0


def cmd_oracle_aggregation(args) -> int:
    """Input JSON: {"layer": [[value, weight], ...], ...}; values may be nested lists."""
    data = json.loads(Path(args.input).read_text())
    contributions = {k: [(np.asarray(v, dtype=float), float(w)) for v, w in items] for k, items in data.items()}
    out = aggregation_oracle(contributions)
    print(json.dumps({k: np.asarray(v).tolist() for k, v in out.items()}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s2fl", description="Sliding split federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run the base config (once per repeat)")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("sweep", help="run base x sweep x repeats and write aggregate.csv")
    p.add_argument("config")
    p.set_defaults(func=cmd_sweep)
    oracle = sub.add_parser("oracle", help="brute-force reference computations").add_subparsers(
        dest="oracle", required=True)
    p = oracle.add_parser("grouping", help="optimal grouping by enumeration")
    p.add_argument("input")
    p.add_argument("--group-size", type=int, default=2)
    p.set_defaults(func=cmd_oracle_grouping)
    p = oracle.add_parser("aggregation", help="per-layer weighted mean")
    p.add_argument("input")
    p.set_defaults(func=cmd_oracle_aggregation)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (S2FLError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
