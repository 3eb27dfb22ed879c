"""Command line: ``run``, ``validate`` and ``partition-report``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, build_plan, load_dataset, parse_config
from .errors import CapacityError, ConfigError, ConsistencyError, DataIOError, FormatError, LabelError
from .runtime import RoundRecord, run_experiment

log = logging.getLogger("pflsim")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_CAPACITY = 4
EXIT_OUTPUT = 5

CSV_HEADER = ("round", "scope", "accuracy", "precision", "recall", "f1", "loss")


class OutputExistsError(Exception):
    pass


def _fmt(x: float) -> str:
    return f"{x:.6f}" if math.isfinite(x) else ""


def export_csv(records: Sequence[RoundRecord], path) -> None:
    """One ``global`` row and one row per client for every evaluated round."""
    if not records:
        raise ValueError("no records to export")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for rec in sorted(records, key=lambda r: r.round):
            if not rec.evaluated:
                continue
            g = rec.global_metrics
            writer.writerow([rec.round, "global", _fmt(g.accuracy), _fmt(g.precision), _fmt(g.recall), _fmt(g.f1), _fmt(rec.mean_train_loss)])
            for cid, m in enumerate(rec.client_metrics):
                loss = rec.client_losses.get(cid, float("nan"))
                writer.writerow([rec.round, cid, _fmt(m.accuracy), _fmt(m.precision), _fmt(m.recall), _fmt(m.f1), _fmt(loss)])


def _summary(config: ExperimentConfig, records: Sequence[RoundRecord], wall: float) -> dict:
    last = [r for r in records if r.evaluated][-1]
    keys = ("accuracy", "precision", "recall", "f1")
    g = last.global_metrics
    return {
        "strategy": config.strategy.name,
        "seed": config.training.seed,
        "rounds": config.training.rounds,
        "wall_time_s": round(wall, 3),
        "final_round": last.round,
        "global": {k: getattr(g, k) for k in keys},
        "personalized_mean": {k: float(np.mean([getattr(m, k) for m in last.client_metrics])) for k in keys},
        "clients": [{k: getattr(m, k) for k in keys} for m in last.client_metrics],
    }


def _prepare_output(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise OutputExistsError(f"output directory {out} exists and is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)


def run(config: ExperimentConfig, *, force: bool = False) -> int:
    """Execute an experiment and write metrics.csv, summary.json and config.json."""
    out = Path(config.output.dir)
    try:
        _prepare_output(out, force)
    except OutputExistsError as exc:
        log.error("%s", exc)
        return EXIT_OUTPUT
    try:
        dataset = load_dataset(config.dataset, config.training.seed)
    except (OSError, FormatError, ConsistencyError, LabelError, DataIOError) as exc:
        log.error("dataset load failed: %s", exc)
        return EXIT_DATASET
    try:
        plan = build_plan(config, dataset)
        gcfg = config.global_config()
        (out / "config.json").write_text(config.to_json())
        start = time.perf_counter()
        result = run_experiment(gcfg, plan, dataset)
        wall = time.perf_counter() - start
    except CapacityError as exc:
        log.error("capacity error: %s", exc)
        return EXIT_CAPACITY
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    export_csv(result.records, out / "metrics.csv")
    (out / "summary.json").write_text(json.dumps(_summary(config, result.records, wall), indent=2) + "\n")
    log.info("wrote %s", out)
    return EXIT_OK


def partition_report(config: ExperimentConfig) -> str:
    dataset = load_dataset(config.dataset, config.training.seed)
    plan = build_plan(config, dataset)
    hist = plan.label_histograms(dataset)
    width = max(5, len(str(int(hist.max()))) + 1)
    head = "client  shards    n  labels | " + "".join(f"{k:>{width}}" for k in range(dataset.num_classes))
    lines = [
        f"{plan.num_clients} clients x {len(plan.assignments[0])} shards x {plan.shard_size} samples "
        f"({plan.num_shards * plan.shard_size} of {len(dataset)} used)",
        head,
        "-" * len(head),
    ]
    for cid, row in enumerate(hist):
        shards = ",".join(str(s) for s in plan.assignments[cid])
        lines.append(
            f"{cid:>6}  {shards:>6} {int(row.sum()):>4}  {int((row > 0).sum()):>6} | " + "".join(f"{int(v):>{width}}" for v in row)
        )
    shard_labels = [len(np.unique(dataset.labels[plan.shard_indices(s)])) for s in range(plan.num_shards)]
    lines.append(f"max distinct labels per shard: {max(shard_labels)}; per client: {int((hist > 0).sum(axis=1).max())}")
    return "\n".join(lines)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pflsim", description="Personalised federated learning simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log every evaluated round")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int, help="overrides training.seed")
    r.add_argument("--out", help="overrides output.dir")
    r.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    v = sub.add_parser("validate", help="parse and validate a config only")
    v.add_argument("--config", required=True)
    pr = sub.add_parser("partition-report", help="per-client label histograms of the shard plan")
    pr.add_argument("--config", required=True)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    log.setLevel(logging.INFO if args.verbose or args.command == "run" else logging.WARNING)
    # per-round progress only on request
    logging.getLogger("pflsim.runtime").setLevel(logging.INFO if args.verbose else logging.WARNING)
    try:
        config = parse_config(args.config)
        if args.command == "run":
            config = config.with_overrides(seed=args.seed, out=args.out)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("cannot read config: %s", exc)
        return EXIT_CONFIG
    if args.command == "validate":
        print(f"{args.config}: ok ({config.strategy.name}, {config.training.rounds} rounds)")
        return EXIT_OK
    if args.command == "partition-report":
        try:
            print(partition_report(config))
        except CapacityError as exc:
            log.error("capacity error: %s", exc)
            return EXIT_CAPACITY
        except (OSError, FormatError, ConsistencyError, LabelError) as exc:
            log.error("dataset load failed: %s", exc)
            return EXIT_DATASET
        return EXIT_OK
    return run(config, force=args.force)


if __name__ == "__main__":
    sys.exit(main())
