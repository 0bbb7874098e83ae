"""``coopsched`` command line: gen, train, verify, sim, sweep, dump.

Results go to stdout or ``--out`` as JSON or CSV. Exit codes: 0 success,
2 invalid configuration, 3 training failure, 4 failed verification,
5 undecodable message, 6 scheduler disagreement between agents.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from .config import RunConfig
from .errors import CapacityError, ConfigError, ConsistencyFault, DecodeError, TrainingError
from .netsim import SWEEP_COLUMNS, LocalState, baseline_broadcast, run_frame, scaling_sweep
from .relax import train_toy
from .scene import Scenario
from .sched import top1_dense
from .verify import faulty_top2, run_all
from .wire import dump

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_VERIFY = 4
EXIT_DECODE = 5
EXIT_CONSISTENCY = 6


def _emit(text: str, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _csv(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _config(args) -> RunConfig:
    return RunConfig.load(args.config, args.override, args.seed)


def _scenario(cfg: RunConfig) -> Scenario:
    try:
        return cfg.scene().build()
    except CapacityError as exc:
        raise ConfigError("scene.n_objects", str(exc)) from None


def cmd_gen(args) -> int:
    cfg = _config(args)
    _emit(_json(_scenario(cfg).to_dict()), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    scenario = _scenario(cfg)
    result = train_toy([scenario], cfg.train())
    out = Path(args.out)
    metrics = Path(args.metrics) if args.metrics else out.with_suffix(".csv")
    result.params.save(out, cfg["train.lambda"])
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(result.csv_rows())
    metrics.write_text(buf.getvalue())
    last = result.metrics[-1]
    _emit(_json({
        "config": cfg.to_dict(),
        "params": str(out),
        "metrics": str(metrics),
        "final": {"loss_task": last.loss_task, "loss_semantic": last.loss_semantic,
                  "bytes": last.bytes, "selected_cells": last.selected_cells},
    }), None)
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_all(args.trials, args.seed, faulty_top2 if args.inject_fault else top1_dense)
    if args.json:
        _emit(_json({"trials": args.trials, "seed": args.seed,
                     "checks": [r.to_dict() for r in results]}), args.out)
    else:
        lines = []
        for r in results:
            lines.append(r.line())
            if not r.passed:
                lines.append("  counterexample: " + json.dumps(r.counterexample, sort_keys=True))
        _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_sim(args) -> int:
    cfg = _config(args)
    scenario = _scenario(cfg)
    params = cfg.toy_params()
    state = LocalState.build(scenario, params)
    report = run_frame(scenario, params, cfg.scheduler(params), cfg.budget(), cfg["sim.ego"],
                       cfg["sim.frame_id"], state=state,
                       compute_latency_ms=cfg["sim.compute_latency_ms"],
                       keep_messages=bool(args.dump_messages))
    doc = report.to_dict()
    if args.baseline:
        base = baseline_broadcast(scenario, params, cfg.budget(), cfg["sim.ego"], state=state)
        doc["baseline"] = base.to_dict()
    if args.dump_messages:
        Path(args.dump_messages).write_bytes(b"".join(report.messages))
    _emit(_json(doc), args.out)
    return EXIT_OK


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _agent_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_sweep(args) -> int:
    cfg = _config(args)
    n_list = args.agents if args.agents is not None else cfg["sweep.agents"]
    overrides = [("sweep.agents", n_list)]
    if args.seeds is not None:
        overrides.append(("sweep.seeds", args.seeds))
    cfg = RunConfig.from_dict(cfg.to_dict(), overrides)
    params = cfg.toy_params()
    seeds = [cfg["seed"] + k for k in range(cfg["sweep.seeds"])]
    ego = cfg["sim.ego"]
    try:
        result = scaling_sweep(cfg.scene(), cfg["sweep.agents"], seeds, cfg.budget(), params,
                               cfg.scheduler(params), ego=ego, workers=args.workers)
    except CapacityError as exc:
        raise ConfigError("scene.n_objects", str(exc)) from None
    if args.plot_data:
        text = _csv(result.long_rows(), ("N", "seed", "metric", "value"))
    elif args.json:
        text = _json({"rows": result.rows, "summary": result.summary})
    else:
        text = _csv(result.rows, SWEEP_COLUMNS)
    _emit(text, args.out)
    return EXIT_OK


def cmd_dump(args) -> int:
    data = Path(args.file).read_bytes()
    text = dump(data, args.max_entries)
    _emit(text if text.endswith("\n") else text + "\n", args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coopsched", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def configured(name, help_, out_help="output path (stdout if omitted)", out_required=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run configuration (built-in defaults if omitted)")
        p.add_argument("--seed", type=int, help="overrides the configured seed")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="set one configuration key; repeatable")
        p.add_argument("--out", help=out_help, required=out_required)
        return p

    p = configured("gen", "write a scenario description")
    p.set_defaults(func=cmd_gen)

    p = configured("train", "train the toy pipeline", "parameter file to write", out_required=True)
    p.set_defaults(func=cmd_train)
    p.add_argument("--metrics", help="per-epoch CSV path (default: --out with .csv suffix)")

    p = sub.add_parser("verify", help="randomised optimality and consistency checks")
    p.set_defaults(func=cmd_verify)
    p.add_argument("--trials", type=_positive, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--json", action="store_true")
    p.add_argument("--inject-fault", action="store_true",
                   help="replace the top-1 selector with a top-2 one (negative control)")

    p = configured("sim", "simulate one frame and print the report as JSON")
    p.set_defaults(func=cmd_sim)
    p.add_argument("--baseline", action="store_true", help="also report full broadcast")
    p.add_argument("--dump-messages", metavar="PATH", help="write the frame's wire messages")

    p = configured("sweep", "scheduled and broadcast bytes over agent counts and seeds")
    p.set_defaults(func=cmd_sweep)
    p.add_argument("--agents", type=_agent_list, help="comma-separated agent counts, ascending")
    p.add_argument("--seeds", type=int, help="number of seeds, counted up from --seed")
    p.add_argument("--workers", type=int, default=1)
    fmt = p.add_mutually_exclusive_group()
    fmt.add_argument("--csv", action="store_true", help="per-(N, seed) rows (default)")
    fmt.add_argument("--json", action="store_true", help="rows plus per-N means")
    fmt.add_argument("--plot-data", action="store_true", help="long-format CSV")

    p = sub.add_parser("dump", help="print a file of wire messages as text")
    p.set_defaults(func=cmd_dump)
    p.add_argument("file")
    p.add_argument("--max-entries", type=int, default=None)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except DecodeError as exc:
        print(f"error: decode failed: {exc}", file=sys.stderr)
        return EXIT_DECODE
    except ConsistencyFault as exc:
        print(f"error: agents disagree on the schedule: {exc}", file=sys.stderr)
        return EXIT_CONSISTENCY


if __name__ == "__main__":
    sys.exit(main())
