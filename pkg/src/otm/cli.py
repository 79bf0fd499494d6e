"""Command-line entry point: ``otm run | explore | check-opacity | scenarios``."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from otm import machine as M
from otm.explore import BudgetExceeded, SeededRandom, explore, run
from otm.history import MalformedHistory, read_trace, write_trace
from otm.opacity import check_opaque
from otm.runtime import RuntimeConfig, run_program
from otm.scenarios import SCENARIOS, get
from otm.syntax import ParseError, SourceProgram, parse, print_expr
from otm.terms import EvalError, LevelError

EXIT_OK, EXIT_DEADLOCK, EXIT_NOT_OPAQUE, EXIT_BAD_INPUT = 0, 2, 3, 4


def _show(v) -> str:
    try:
        return print_expr(v)
    except ValueError:
        return repr(v)


def _load(target: str, params: dict, small: bool) -> SourceProgram:
    if target in SCENARIOS:
        sc = get(target)
        if small and not params:
            return sc.small_program()
        return sc.program(**params) if sc.desk else sc.build()
    path = Path(target)
    if not path.exists():
        raise FileNotFoundError(f"no scenario or file named {target!r}")
    return parse(path.read_bytes())


def _params(args) -> dict:
    out = {}
    if args.threads is not None:
        out["threads"] = args.threads
    if args.iters is not None:
        out["iters"] = args.iters
    return out


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get("OTM_SEED", "0"))


def _print_result(heap: dict, output: str, outcomes: dict, finished, deadlock: bool, out) -> None:
    print("heap:", file=out)
    for k, v in heap.items():
        print(f"  {k} = {_show(v)}", file=out)
    print(f"output: {output!r}", file=out)
    print("threads:", file=out)
    for name, (kind, v) in outcomes.items():
        print(f"  {name}: {kind}" + ("" if v is None else f" {_show(v)}"), file=out)
    print("transactions:", file=out)
    for kind, parts, merged in finished:
        print(f"  {kind} {{{', '.join(sorted(map(str, parts)))}}}" + (" merged" if merged else ""), file=out)
    print(f"deadlock: {'yes' if deadlock else 'no'}", file=out)


def cmd_run(args, out) -> int:
    prog = _load(args.target, _params(args), small=False)
    seed = _seed(args)
    if args.engine == "ref":
        res = run(M.load_program(prog, input=args.input), SeededRandom(seed))
        st = res.state
        heap = {st.locnames.get(r, r): v for r, v in sorted(st.heap.items())}
        _print_result(heap, st.output, M.outcomes(st), st.finished, res.deadlock, out)
        events, deadlock = st.events(), res.deadlock
    else:
        cfg = RuntimeConfig(timeout=args.timeout_ms / 1000, input=args.input, seed=seed)
        res = run_program(prog, cfg)
        _print_result(res.heap, res.output, res.outcomes, res.finished, res.deadlock, out)
        events, deadlock = res.events, res.deadlock
    if args.trace:
        write_trace(args.trace, events)
    return EXIT_DEADLOCK if deadlock else EXIT_OK


def cmd_explore(args, out) -> int:
    prog = _load(args.target, _params(args), small=True)
    res = explore(prog, max_depth=args.max_depth, budget=args.budget)
    print(f"states: {res.states}{' (depth bound reached)' if res.truncated else ''}", file=out)
    print(f"terminal summaries: {len(res.terminals)}", file=out)
    for i, s in enumerate(sorted(res.terminals, key=repr)):
        flag = "StuckDeadlock" if s.deadlock else "terminated"
        heap = ", ".join(f"{k}={_show(v)}" for k, v in s.heap)
        threads = ", ".join(f"{n}:{kind}" + ("" if v is None else f" {_show(v)}") for n, kind, v in s.outcomes)
        commits = "; ".join(f"{k} {{{', '.join(sorted(map(str, p)))}}}{' merged' if m else ''}" for k, p, m in s.finished)
        print(f"[{i}] {flag} | heap: {heap} | threads: {threads} | tx: {commits}", file=out)
    n_dead = len(res.deadlocks)
    print(f"deadlocked summaries: {n_dead}/{len(res.terminals)}", file=out)
    return EXIT_OK


def cmd_check(args, out) -> int:
    events = read_trace(args.trace)
    v = check_opaque(events, max_brute_force=args.max_brute_force)
    print(f"verdict: {v.label}", file=out)
    if v.witness is not None:
        print(f"witness order: {' '.join(map(str, v.witness))} ({v.reason})", file=out)
    elif v.reason:
        print(f"reason: {v.reason}", file=out)
    return EXIT_NOT_OPAQUE if v.opaque is False else EXIT_OK


def cmd_scenarios(args, out) -> int:
    for sc in SCENARIOS.values():
        params = f" [{', '.join(f'{k}={v}' for k, v in sc.desk.items())}]" if sc.desk else ""
        print(f"{sc.name}{params}: {sc.summary}; expect {sc.expect}", file=out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otm", description="Open transactional memory toolkit")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run a scenario or .otm file")
    r.add_argument("target")
    r.add_argument("--engine", choices=["ref", "concurrent"], default="ref")
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int)
    r.add_argument("--iters", type=int)
    r.add_argument("--input", default="")
    r.add_argument("--trace")
    r.add_argument("--timeout-ms", type=int, default=5000)
    r.set_defaults(fn=cmd_run)

    e = sub.add_parser("explore", help="enumerate all schedules")
    e.add_argument("target")
    e.add_argument("--max-depth", type=int, default=200)
    e.add_argument("--budget", type=int, default=200_000)
    e.add_argument("--threads", type=int)
    e.add_argument("--iters", type=int)
    e.set_defaults(fn=cmd_explore)

    c = sub.add_parser("check-opacity", help="check a recorded trace")
    c.add_argument("trace")
    c.add_argument("--max-brute-force", type=int, default=10)
    c.set_defaults(fn=cmd_check)

    s = sub.add_parser("scenarios", help="list the scenario corpus")
    s.set_defaults(fn=cmd_scenarios)
    return p


def main(argv: list[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args, out)
    except (ParseError, LevelError, EvalError, MalformedHistory) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (FileNotFoundError, BudgetExceeded) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
