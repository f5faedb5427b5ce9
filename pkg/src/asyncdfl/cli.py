"""Command-line front end.

Subcommands::

    asyncdfl run <config>                 run every variant x seed in the config
    asyncdfl sweep <config> --seeds 0 1 2 same, with the seed list overridden
    asyncdfl plotdata <dir>               long-format CSV of all runs under dir
    asyncdfl topo-dump <config>           adjacency matrix of the configured topology

Outputs go under ``$ASYNCDFL_OUTPUT_ROOT`` (default: the current directory)
joined with ``experiment.output_dir``. Exit codes: 0 success, 1 a run failed,
2 configuration error.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np

from .config import dump_spec, from_dict, parse_config, to_dict
from .errors import ConfigError
from .simulator import (
    ALL_DEVICES,
    METRIC_COLUMNS,
    Simulation,
    centralized_baseline,
    run_sync_baseline,
    time_to_target,
)
from .topology import build_topology, to_csv

logger = logging.getLogger("asyncdfl")

OUTPUT_ROOT_ENV = "ASYNCDFL_OUTPUT_ROOT"
EXIT_OK, EXIT_RUN_FAILED, EXIT_CONFIG = 0, 1, 2
NOT_REACHED = "/"
PLOT_SERIES = [
    "test_acc_avg", "test_acc_self", "consensus_global", "density",
    "train_loss", "bytes_sent_cum", "flops_cum",
]
AGGREGATE_COLUMNS = ["variant", "runs", "acc_mean", "acc_std", "time_to_target", "mflops", "bytes"]
RUN_COLUMNS = ["variant", "seed", "final_acc", "time_to_target", "mflops", "bytes", "status"]


def output_root(override=None):
    if override:
        return override
    return os.environ.get(OUTPUT_ROOT_ENV, os.getcwd())


def run_one(cfg, variant):
    if variant == "sync":
        return run_sync_baseline(cfg)
    return Simulation(cfg.variant(variant), variant).run()


def _mean_or_slash(values):
    if not values or any(v == NOT_REACHED for v in values):
        return NOT_REACHED
    return float(np.mean(values))


def summarize_runs(records):
    """Per-variant means of the per-run records (see ``RUN_COLUMNS``)."""
    out = []
    for variant in dict.fromkeys(r["variant"] for r in records):
        ok = [r for r in records if r["variant"] == variant and r["status"] == "ok"]
        if not ok:
            continue
        accs = [r["final_acc"] for r in ok]
        out.append({
            "variant": variant,
            "runs": len(ok),
            "acc_mean": float(np.mean(accs)),
            "acc_std": float(np.std(accs)),
            "time_to_target": _mean_or_slash([r["time_to_target"] for r in ok]),
            "mflops": float(np.mean([r["mflops"] for r in ok])),
            "bytes": float(np.mean([r["bytes"] for r in ok])),
        })
    return out


def _write_table(path, columns, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] for c in columns])


def run_experiment(spec, out_dir):
    """Run every seed x variant; returns the exit status.

    Each run writes ``<variant>_seed<k>/`` with metrics.csv and summary.json;
    ``runs.csv`` and ``aggregate.csv`` collect the results.
    """
    exp = spec.experiment
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "experiment.yaml"), "w") as f:
        f.write(dump_spec(spec))
    target = exp.target_accuracy
    if target is None and exp.baseline:
        a_star = centralized_baseline(spec.run)
        target = a_star - 0.02
        logger.info("centralized accuracy %.4f, target %.4f", a_star, target)
        with open(os.path.join(out_dir, "baseline.json"), "w") as f:
            json.dump({"centralized_accuracy": a_star, "target_accuracy": target}, f, indent=2)
    records = []
    for seed in exp.seeds:
        for variant in exp.variants:
            cfg = from_dict(to_dict(spec.run))
            cfg.seed = seed
            name = f"{variant}_seed{seed}"
            try:
                log = run_one(cfg, variant)
            except Exception as exc:  # isolate failures per run
                logger.error("run %s failed: %s", name, exc)
                records.append({"variant": variant, "seed": seed, "final_acc": math.nan,
                                "time_to_target": NOT_REACHED, "mflops": math.nan,
                                "bytes": math.nan, "status": f"failed: {exc}"})
                continue
            if target is not None:
                log.summary["target_accuracy"] = target
                log.summary["time_to_target"] = time_to_target(log.rows, target)
            log.write(os.path.join(out_dir, name))
            s = log.summary
            records.append({
                "variant": variant, "seed": seed, "final_acc": s["final_test_acc_avg"],
                "time_to_target": s.get("time_to_target", NOT_REACHED),
                "mflops": s["mflops"], "bytes": s["bytes"], "status": "ok",
            })
            logger.info("%s: acc %.4f, time-to-target %s", name, s["final_test_acc_avg"],
                        s.get("time_to_target", NOT_REACHED))
    _write_table(os.path.join(out_dir, "runs.csv"), RUN_COLUMNS, records)
    _write_table(os.path.join(out_dir, "aggregate.csv"), AGGREGATE_COLUMNS, summarize_runs(records))
    failed = any(r["status"] != "ok" for r in records)
    return EXIT_RUN_FAILED if failed else EXIT_OK


def _read_metrics(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    missing = set(METRIC_COLUMNS) - set(rows[0] if rows else METRIC_COLUMNS)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    return rows


def emit_plot_data(directory):
    """Tidy rows ``(run, series, x, y)`` from every metrics.csv under ``directory``.

    Only the all-device rows are used; output is sorted by (series, x, run).
    """
    out = []
    for root, _, files in sorted(os.walk(directory)):
        if "metrics.csv" not in files:
            continue
        run = os.path.relpath(root, directory)
        for r in _read_metrics(os.path.join(root, "metrics.csv")):
            if int(r["device"]) != ALL_DEVICES:
                continue
            for s in PLOT_SERIES:
                out.append({"run": run, "series": s, "x": float(r["sim_time"]), "y": float(r[s])})
    out.sort(key=lambda r: (r["series"], r["x"], r["run"]))
    return out


def write_plot_data(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["run", "series", "x", "y"])
        for r in rows:
            w.writerow([r["run"], r["series"], repr(r["x"]), repr(r["y"])])


def build_parser():
    p = argparse.ArgumentParser(prog="asyncdfl", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run all variants and seeds of a config")
    r.add_argument("config")
    r.add_argument("--out", help=f"output root (overrides ${OUTPUT_ROOT_ENV})")
    s = sub.add_parser("sweep", help="run a config over an explicit seed list")
    s.add_argument("config")
    s.add_argument("--seeds", type=int, nargs="+", required=True)
    s.add_argument("--out", help=f"output root (overrides ${OUTPUT_ROOT_ENV})")
    d = sub.add_parser("plotdata", help="collect plot-ready data from a results directory")
    d.add_argument("dir")
    d.add_argument("-o", "--output", help="CSV path (default: <dir>/plotdata.csv)")
    t = sub.add_parser("topo-dump", help="print the adjacency matrix as CSV")
    t.add_argument("config")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plotdata":
            if not os.path.isdir(args.dir):
                raise ConfigError(f"not a directory: {args.dir}")
            rows = emit_plot_data(args.dir)
            path = args.output or os.path.join(args.dir, "plotdata.csv")
            write_plot_data(rows, path)
            print(path)
            return EXIT_OK
        spec = parse_config(args.config)
        if args.command == "topo-dump":
            sys.stdout.write(to_csv(build_topology(spec.run.topology, spec.run.n_devices)))
            return EXIT_OK
        if args.command == "sweep":
            spec.experiment.seeds = list(args.seeds)
        out_dir = os.path.join(output_root(args.out), spec.experiment.output_dir)
        status = run_experiment(spec, out_dir)
        print(out_dir)
        return status
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILED


if __name__ == "__main__":
    sys.exit(main())
