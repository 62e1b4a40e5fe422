"""Command-line front end: ``validate``, ``run`` and ``sweep``."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .config import ConfigError, ScenarioConfig, load_config, validate
from .sim import EVENT_COLUMNS, SimLog, run_scenario, summarize

OUTPUT_ENV = "FBCBF_OUTPUT_ROOT"
DEFAULT_OUTPUT = "runs"

EXIT_OK = 0
EXIT_UNSAFE = 1
EXIT_INVALID = 2
EXIT_ABORTED = 3

SWEEP_METRICS = ("safe", "aborted", "safety_violation_steps", "contact_lost_steps",
                 "torque_infeasible_steps", "filter_activations", "min_f", "max_f",
                 "max_abs_e_f", "max_abs_e_y", "max_abs_e_z", "max_abs_e_o1", "max_abs_e_o2",
                 "max_abs_e_o3", "error")


def fmt_float(x) -> str:
    return "%.17g" % x


def output_root(arg: str | None) -> Path:
    return Path(arg if arg else os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT))


def run_dir(root: Path, cfg: ScenarioConfig, seed: int) -> Path:
    """Output directory, unique per config hash and seed."""
    return root / f"{cfg.content_hash()[:12]}-s{seed}"


def write_trajectory(path: Path, log: SimLog):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(log.columns) + "\n")
        for row in log.data:
            fh.write(",".join(fmt_float(v) for v in row) + "\n")


def write_events(path: Path, log: SimLog):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_COLUMNS)
        for t, k, name, detail in log.events:
            w.writerow([fmt_float(t), k, name, detail])


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def write_json(path: Path, data: dict):
    path.write_text(json.dumps({k: _jsonable(v) for k, v in data.items()}, indent=2,
                               sort_keys=True) + "\n")


def exit_code(summary: dict) -> int:
    if summary["aborted"]:
        return EXIT_ABORTED
    return EXIT_OK if summary["safe"] else EXIT_UNSAFE


def _load(path) -> ScenarioConfig | None:
    try:
        return load_config(path)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return None


def _report(checks) -> bool:
    for c in checks:
        line = f"[{'PASS' if c.ok else 'FAIL'}] {c.name}"
        print(f"{line}: {c.detail}" if c.detail else line)
    return all(c.ok for c in checks)


def cmd_validate(args) -> int:
    cfg = _load(args.config)
    if cfg is None:
        return EXIT_INVALID
    return EXIT_OK if _report(validate(cfg)) else EXIT_INVALID


def execute(cfg: ScenarioConfig, seed: int, out: Path, config_path: str = "") -> dict:
    """Run one scenario and write its artifacts into ``out``; returns the summary."""
    log = run_scenario(cfg, seed=seed)
    summary = summarize(log, cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(out / "trajectory.csv", log)
    write_events(out / "events.csv", log)
    write_json(out / "summary.json", summary)
    write_json(out / "manifest.json", {"config_path": str(config_path), "seed": seed,
                                       "output_dir": str(out), "config_hash": cfg.content_hash(),
                                       "version": __version__})
    return summary


def cmd_run(args) -> int:
    cfg = _load(args.config)
    if cfg is None:
        return EXIT_INVALID
    checks = validate(cfg)
    if not all(c.ok for c in checks):
        _report([c for c in checks if not c.ok])
        return EXIT_INVALID
    seed = cfg.sim.seed if args.seed is None else args.seed
    out = Path(args.out) if args.out else run_dir(output_root(None), cfg, seed)
    summary = execute(cfg, seed, out, args.config)
    print(f"wrote {out}")
    for key in ("safe", "min_f", "max_f", "safety_violation_steps", "contact_lost_steps"):
        print(f"{key} = {summary[key]}")
    if summary["aborted"]:
        print(f"aborted: {summary['abort_reason']}", file=sys.stderr)
    return exit_code(summary)


def load_grid(path) -> dict:
    """Grid file: a ``[grid]`` table of dotted config keys mapped to value lists."""
    data = tomli.loads(Path(path).read_text())
    unknown = sorted(set(data) - {"grid"})
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
    grid = data.get("grid", {})
    flat = {}

    def walk(prefix, table):
        for k, v in table.items():
            key = f"{prefix}.{k}" if prefix else k
            if isinstance(v, dict):
                walk(key, v)
            elif isinstance(v, list):
                flat[key] = v
            else:
                raise ConfigError(f"{path}: grid.{key} must be an array")

    walk("", grid)
    return flat


def grid_points(grid: dict):
    """All combinations; an empty grid has none."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        return []
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _sweep_one(job):
    cfg, point, seed, root = job
    row = {**point, "seed": seed}
    try:
        run_cfg = cfg.replace(**point)
        failed = [c.name for c in validate(run_cfg) if not c.ok]
        if failed:
            raise ConfigError("invalid: " + "; ".join(failed))
        summary = execute(run_cfg, seed, run_dir(root, run_cfg, seed))
        row.update({k: summary.get(k, "") for k in SWEEP_METRICS if k != "error"})
        row["error"] = ""
    except Exception as exc:  # a failed run is recorded, the sweep continues
        row.update({k: "" for k in SWEEP_METRICS})
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def _cell(v):
    if isinstance(v, float):
        return fmt_float(v)
    return str(v)


def cmd_sweep(args) -> int:
    cfg = _load(args.config)
    if cfg is None:
        return EXIT_INVALID
    try:
        grid = load_grid(args.grid)
    except (ConfigError, OSError, tomli.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    root = output_root(args.out)
    seeds = [cfg.sim.seed + i for i in range(args.seeds)]
    jobs = [(cfg, p, s, root) for p in grid_points(grid) for s in seeds]
    if args.jobs > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    table = Path(args.table) if args.table else root / "sweep.csv"
    table.parent.mkdir(parents=True, exist_ok=True)
    header = list(grid) + ["seed"] + list(SWEEP_METRICS)
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(r[h]) for h in header])
    print(f"wrote {table} ({len(rows)} runs)")
    bad = [r for r in rows if r["error"] or r["safe"] is not True]
    return EXIT_OK if not bad else EXIT_UNSAFE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbcbf", description="Safe force/position control scenarios.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a config file")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("run", help="run one scenario and write CSV artifacts")
    r.add_argument("config")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default=None,
                   help=f"output directory (default: ${OUTPUT_ENV}/<hash>-s<seed>)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a parameter grid and aggregate the results")
    s.add_argument("config")
    s.add_argument("--grid", required=True, help="TOML file with a [grid] table of value lists")
    s.add_argument("--seeds", type=int, default=1, help="number of seeds per grid point")
    s.add_argument("--out", default=None, help=f"output root (default: ${OUTPUT_ENV} or ./runs)")
    s.add_argument("--table", default=None, help="sweep CSV path (default: <out>/sweep.csv)")
    s.add_argument("--jobs", type=int, default=1, help="concurrent runs")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
