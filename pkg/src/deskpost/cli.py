"""Command line entry point: ``deskpost run|evaluate|compare|inspect-trace``.

Exit codes: 0 success, 2 invalid input (nothing written), 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2


def _limit_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        from .config import ConfigError
        raise ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    threadpool_limits(n)


def cmd_run(args) -> int:
    from .config import load_config
    from .runner import run_experiment
    cfg = load_config(args.config, args.seed)
    run_dir = Path(args.run_dir) if args.run_dir else Path("runs") / Path(args.config).stem
    manifest = run_experiment(cfg, run_dir)
    print(f"run complete: {run_dir} ({len(manifest['stages'])} stages, "
          f"config {manifest['config_hash'][:12]})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .model import TinyLM
    from .tasks import evaluate_items, load_items_jsonl
    items = load_items_jsonl(args.tasks)
    if not items:
        raise ValueError(f"{args.tasks}: task set is empty")
    model = TinyLM.load(args.checkpoint)
    report = evaluate_items(model, items, args.max_new_tokens)
    text = json.dumps(report.to_json(), indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(f"accuracy {report.accuracy:.4f} ({report.correct}/{report.total})")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .report import compare_runs
    res = compare_runs(args.a, args.b, args.dataset, args.metric, args.series, args.stage,
                       args.out)
    for row in res["per_seed"]:
        print(f"seed {row['seed']}: delta {row['delta']:+.4f}")
    print(f"mean delta {res['mean_delta']:+.4f}")
    return EXIT_OK


def cmd_inspect_trace(args) -> int:
    try:
        traces = json.loads(Path(args.trace).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{args.trace}: not JSON: {exc}") from exc
    if isinstance(traces, dict):
        traces = [traces]
    picked = traces if args.episode is None else [traces[args.episode]]
    leaks = 0
    for i, tr in enumerate(picked):
        print(f"== episode {i}: {tr['turn_count']} turns, terminal={tr['terminal']}, "
              f"answer={tr['final_answer']!r}")
        for turn in tr["turns"]:
            trained = sum(turn["mask"])
            if turn["role"] != "assistant":
                leaks += trained
            print(f"  [{turn['role']:>9}] {len(turn['tokens']):4d} tok, {trained:4d} trained | "
                  f"{turn['text']!r}")
    print(f"unmasked non-assistant tokens: {leaks}")
    return EXIT_OK if leaks == 0 else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deskpost", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="execute a multi-stage experiment config")
    r.add_argument("config", help="experiment JSON config")
    r.add_argument("--run-dir", help="output directory (must be empty or absent)")
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("evaluate", help="greedy accuracy of a checkpoint on a task set")
    e.add_argument("checkpoint")
    e.add_argument("--tasks", required=True, help='JSONL of {"prompt", "reference"}')
    e.add_argument("--max-new-tokens", type=int, default=32)
    e.add_argument("--out", help="write the per-item report here")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="per-seed deltas between two groups of runs")
    c.add_argument("--a", nargs="+", required=True, help="run directories, side a")
    c.add_argument("--b", nargs="+", required=True, help="run directories, side b")
    c.add_argument("--dataset", required=True, help="evaluated dataset view, e.g. facts.test")
    c.add_argument("--metric", default="accuracy")
    c.add_argument("--series", help="training metric to export and plot, e.g. mean_reward")
    c.add_argument("--stage", help="stage to read (default: last stage with the evaluation)")
    c.add_argument("--out", help="directory for deltas.csv, series.csv and PNG figures")
    c.set_defaults(func=cmd_compare)

    t = sub.add_parser("inspect-trace", help="print an exported episode trace")
    t.add_argument("trace")
    t.add_argument("--episode", type=int, default=None)
    t.set_defaults(func=cmd_inspect_trace)
    return p


def main(argv=None) -> int:
    from .config import ConfigError
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _limit_threads(args.threads)
        return args.func(args)
    except ConfigError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FileNotFoundError, ValueError, KeyError, IndexError) as exc:
        # during a run these come from a stage, so they count as runtime failures
        if args.verb == "run":
            print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # runtime failure; partial outputs are left in place
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
