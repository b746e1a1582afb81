"""Command line entry point: ``nnmerge <gen|run|verify|stats|bench|trace> [options]``.

Every RunConfig key is also a flag (``--parcels-per-cell 20``); flags
override values read from ``--config FILE``. Exit status is 0 on success,
1 on a verification mismatch or counter-law violation and 2 on a
configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .fixtures import EXAMPLE_EDGES, NAMES, run_graph
from .harness import (
    ConfigError,
    CounterLawError,
    RunConfig,
    initial_population,
    merge_statistics,
    report_counters,
    report_document,
    run_cycles,
    verify,
    write_csv,
    write_json,
)
from .parcels import write_csv as write_parcels_csv
from .parcels import write_snapshot

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG = 0, 1, 2

_HELP = {
    "lx": "box extent in x",
    "ly": "box extent in y",
    "lz": "box extent in z",
    "nx": "cells in x",
    "ny": "cells in y",
    "nz": "cells in z",
    "workers": "simulated worker count",
    "parcels_per_cell": "parcels sampled per cell",
    "cycles": "merge cycles to run",
    "seed": "base random seed",
    "output": "JSON report (gen: PCLS snapshot) path",
    "csv": "CSV path (per-cycle rows; gen: parcel table)",
    "snapshot": "PCLS population to start from",
    "checking": "detect conflicting same-epoch window accesses (true/false)",
    "schedule_seed": "randomise worker interleaving with this seed",
    "worker_counts": "comma separated worker counts for verify",
    "configs": "number of random populations for verify",
    "diff": "where verify writes the first mismatch",
    "fault": "inject a known defect (isolated_both, flip_tiebreak)",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("-v", "--verbose", action="store_true")
    for key in RunConfig.keys():
        if key == "mode":
            continue
        common.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=_HELP.get(key))

    p = _Parser(prog="nnmerge", description="Parallel nearest-neighbour clustering of small parcels.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen", parents=[common], help="sample a population and write a PCLS snapshot")
    sub.add_parser("run", parents=[common], help="run merge cycles on a sampled or loaded population")
    sub.add_parser("verify", parents=[common], help="compare the engine with the serial reference")
    sub.add_parser("stats", parents=[common], help="merge statistics over freshly sampled cycles")
    sub.add_parser("bench", parents=[common], help="phase timings and counters over sampled cycles")
    sub.add_parser("trace", parents=[common], help="replay the twelve-vertex example graph")
    return p


_MODE = {"gen": "cycles", "run": "cycles", "verify": "verify", "stats": "stats", "bench": "bench", "trace": "trace"}


def load_config(args) -> RunConfig:
    mapping = {}
    if args.config:
        base = RunConfig.from_file(args.config)
        mapping = {k: getattr(base, k) for k in RunConfig.keys()}
    for key in RunConfig.keys():
        v = getattr(args, key, None)
        if v is not None:
            mapping[key] = v
    mapping["mode"] = _MODE[args.command]
    return RunConfig.from_mapping(mapping)


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_gen(cfg: RunConfig) -> int:
    if not cfg.output and not cfg.csv:
        raise ConfigError("gen needs --output (PCLS) and/or --csv")
    pop = initial_population(cfg)
    if cfg.output:
        write_snapshot(cfg.output, pop)
    if cfg.csv:
        write_parcels_csv(cfg.csv, pop)
    print(f"wrote {pop.n_local} parcels")
    return EXIT_OK


def _cycles(cfg: RunConfig, show) -> int:
    reports = run_cycles(cfg)
    doc = report_document(cfg, reports)
    if cfg.output:
        write_json(cfg.output, doc)
    if cfg.csv:
        write_csv(cfg.csv, reports)
    show(reports, doc)
    try:
        report_counters(reports)
    except CounterLawError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    return EXIT_OK


def cmd_run(cfg: RunConfig) -> int:
    def show(reports, doc):
        for r in reports:
            print(
                f"cycle {r.cycle}: {r.n_before} -> {r.n_after} parcels "
                f"({100 * r.reduction:.2f}% fewer), {r.n_small} small, "
                f"{r.iterations} passes, {r.migrated} migrated"
            )
        c = doc["counters"]
        print(f"barriers {c['barriers']} (expected {c['expected_barriers']}), all-reduces {c['allreduces']}")

    return _cycles(cfg, show)


def cmd_stats(cfg: RunConfig) -> int:
    return _cycles(cfg, lambda reports, doc: _print_json(merge_statistics(reports)))


def cmd_bench(cfg: RunConfig) -> int:
    def show(reports, doc):
        print(f"{'phase':<8} {'min':>10} {'avg':>10} {'max':>10}   (seconds, summed over cycles)")
        for ph in ("build", "resolve", "merge"):
            tot = {s: sum(r.timings[ph][s] for r in reports) for s in ("min", "avg", "max")}
            print(f"{ph:<8} {tot['min']:>10.4f} {tot['avg']:>10.4f} {tot['max']:>10.4f}")
        _print_json(doc["counters"])

    return _cycles(cfg, show)


def cmd_verify(cfg: RunConfig) -> int:
    def progress(k, merges):
        if k % 100 == 0:
            logging.getLogger(__name__).info("%d configs, %d merges", k, merges)

    res = verify(cfg, progress=progress)
    print(res.summary())
    if not res.passed and cfg.diff:
        print(f"diff written to {cfg.diff}")
    return EXIT_OK if res.passed else EXIT_MISMATCH


def cmd_trace(cfg: RunConfig) -> int:
    placement = {}
    slots = [0] * cfg.workers
    for k, name in enumerate(NAMES):
        w = k % cfg.workers
        placement[name] = (w, slots[w])
        slots[w] += 1
    run = run_graph(
        EXAMPLE_EDGES, placement, checking=cfg.checking, schedule_seed=cfg.schedule_seed, fault=cfg.fault
    )
    for line in run.trace_lines():
        print(line)
    for g in run.groups():
        print("group {" + ",".join(g) + "}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "run": cmd_run,
    "verify": cmd_verify,
    "stats": cmd_stats,
    "bench": cmd_bench,
    "trace": cmd_trace,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
