"""Command-line interface: run / validate / trace."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from cfep import harness
from cfep.harness import RunConfig
from cfep.trace import Tracer


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        data = json.load(fh)
    return RunConfig.from_dict(data)


def _add_common(p):
    p.add_argument("--config", required=True, help="JSON config file")


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output.csv = args.out
    if args.plot is not None:
        cfg.output.plot = args.plot
    if args.mode is not None:
        cfg.algorithm.mode = args.mode
    if args.graph is not None:
        cfg.algorithm.graph = args.graph
    cfg.validate()
    records = harness.run_estimator_suite(cfg)
    written = harness.aggregate_and_emit(records, cfg)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_validate(args) -> int:
    try:
        load_config(args.config)
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 1
    print("config ok")
    return 0


def cmd_trace(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.sweep.tx_power_dbm = [cfg.sweep.tx_power_dbm[args.power_index]]
    cfg.sweep.realizations = args.realization + 1
    out = args.out or cfg.output.trace or "trace.jsonl"
    kinds = args.kinds.split(",") if args.kinds else None
    import numpy as np

    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, args.power_index, args.realization])
    )
    with open(out, "w") as fh:
        tracer = Tracer(fh, kinds=kinds)
        harness.run_realization(
            cfg,
            cfg.sweep.tx_power_dbm[0],
            rng,
            estimators=("proposed",),
            tracer=tracer,
        )
    print(f"wrote {tracer.records} records to {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cfep",
        description="Decentralized EP simulator for semi-blind cell-free channel estimation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the Monte-Carlo estimator suite")
    _add_common(p_run)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None, help="CSV output path override")
    p_run.add_argument("--plot", default=None, help="SVG plot path override")
    p_run.add_argument("--mode", choices=["simplified", "exact"], default=None)
    p_run.add_argument("--graph", choices=["grid", "tree"], default=None)
    p_run.set_defaults(func=cmd_run)

    p_val = sub.add_parser("validate", help="check a config file")
    _add_common(p_val)
    p_val.set_defaults(func=cmd_validate)

    p_tr = sub.add_parser("trace", help="dump message traces for one realization")
    _add_common(p_tr)
    p_tr.add_argument("--out", default=None, help="trace output path (.jsonl)")
    p_tr.add_argument("--seed", type=int, default=None)
    p_tr.add_argument("--power-index", type=int, default=0)
    p_tr.add_argument("--realization", type=int, default=0)
    p_tr.add_argument("--kinds", default=None, help="comma-separated record kinds")
    p_tr.set_defaults(func=cmd_trace)

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
