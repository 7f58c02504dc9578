"""Command line entry point.

    gradpoison run --config cfg.json [--seed N] [--out DIR] [--override key=value ...]
    gradpoison sweep --config cfg.json --grid grid.json [--out DIR]
    gradpoison validate --config cfg.json

Exit codes: 0 success, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from pathlib import Path

from . import harness
from .datasets import DatasetError
from .harness import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3

log = logging.getLogger("gradpoison")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradpoison", description="Poisoning experiments on robust aggregation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                     help="dotted config key, value parsed as JSON (repeatable)")

    sweep = sub.add_parser("sweep", help="Cartesian product of a grid over a base config")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--grid", required=True, help='JSON object {"dotted.key": [values, ...]}')
    sweep.add_argument("--out")

    val = sub.add_parser("validate", help="parse and check a config without running it")
    val.add_argument("--config", required=True)
    return p


def _resolve(path, overrides=(), seed=None, out=None) -> harness.ExperimentConfig:
    data = harness.apply_overrides(harness.read_json_object(path), list(overrides))
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["out_dir"] = out
    return harness.parse_config(data)


def _summary_line(summary) -> str:
    return (f"best_val_acc={summary.best_val_acc:.4f} best_epoch={summary.best_epoch} "
            f"final_val_acc={summary.final_val_acc:.4f} n_p={summary.n_p} diverged={int(summary.diverged)}")


def cmd_run(args) -> int:
    cfg = _resolve(args.config, args.override, args.seed, args.out)
    _, summary = harness.run_experiment(cfg)
    print(_summary_line(summary))
    return EXIT_OK


def grid_points(grid: dict) -> list[dict]:
    """Cartesian product of ``{key: [values]}`` in key order as given."""
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid entry {key!r} must be a non-empty list")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def cmd_sweep(args) -> int:
    base = harness.read_json_object(args.config)
    points = grid_points(harness.read_json_object(args.grid))
    root = Path(args.out or base.get("out_dir") or "sweep_out")
    # resolve every point first so a bad grid fails before anything runs
    configs = []
    for i, point in enumerate(points):
        data = json.loads(json.dumps(base))
        for key, value in point.items():
            harness.set_path(data, key, value)
        data["out_dir"] = str(root / f"run_{i:03d}")
        configs.append(harness.parse_config(data))
    harness.check_writable(root)
    rows = []
    for i, (point, cfg) in enumerate(zip(points, configs)):
        _, summary = harness.run_experiment(cfg)
        print(f"run_{i:03d} {json.dumps(point, sort_keys=True)} {_summary_line(summary)}")
        rows.append({"run": f"run_{i:03d}", "params": json.dumps(point, sort_keys=True),
                     "best_val_acc": format(summary.best_val_acc, ".9g"), "best_epoch": summary.best_epoch,
                     "final_val_acc": format(summary.final_val_acc, ".9g")})
    with open(root / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["run"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _resolve(args.config)
    print(f"ok: n_p={cfg.n_p} realized_alpha={cfg.realized_alpha:.4f}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": cmd_run, "sweep": cmd_sweep, "validate": cmd_validate}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
