"""Schedulers for the reference machine and bounded exhaustive exploration."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Any

from otm import machine as M
from otm.machine import Blocked, MachineError, MachineState, Transition

__all__ = [
    "StuckDeadlock", "BudgetExceeded", "SeededRandom", "RoundRobin",
    "Summary", "RunResult", "ExploreResult", "successors", "schedule",
    "run", "explore", "summarize", "canonical_key",
]


class StuckDeadlock(MachineError):
    """No transition is enabled but some thread has not finished."""


class BudgetExceeded(MachineError):
    pass


def _try_fire(s: MachineState, tr: Transition) -> MachineState | None:
    try:
        return M.fire(s, tr)
    except Blocked:
        return None


def successors(s: MachineState) -> list[tuple[Transition, MachineState]]:
    out = []
    for tr in M.candidates(s):
        nxt = _try_fire(s, tr)
        if nxt is not None:
            out.append((tr, nxt))
    return out


class SeededRandom:
    """Uniform choice among enabled transitions, deterministic per seed."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = random.Random(seed)

    def step(self, s: MachineState) -> tuple[Transition, MachineState] | None:
        cands = M.candidates(s)
        self.rng.shuffle(cands)
        for tr in cands:
            nxt = _try_fire(s, tr)
            if nxt is not None:
                return tr, nxt
        return None


class RoundRobin:
    """Cycle through threads in id order; transaction-level transitions
    (commit) are attributed to their lowest participant."""

    def __init__(self):
        self.last = -1

    def step(self, s: MachineState) -> tuple[Transition, MachineState] | None:
        cands = M.candidates(s)
        cands.sort(key=lambda tr: (tr.thread <= self.last, tr.thread, tr.kind != "commit"))
        for tr in cands:
            nxt = _try_fire(s, tr)
            if nxt is not None:
                self.last = tr.thread
                return tr, nxt
        return None


def schedule(s: MachineState, policy) -> MachineState:
    """Apply one transition chosen by ``policy``."""
    if M.is_terminal(s):
        raise M.NotApplicable("state is terminal")
    picked = policy.step(s)
    if picked is None:
        raise StuckDeadlock("no enabled transition")
    return picked[1]


@dataclass(frozen=True)
class Summary:
    """Observable content of a final state."""

    heap: tuple  # ((name or loc id, value), ...)
    output: str
    outcomes: tuple  # ((thread name, kind, value), ...)
    deadlock: bool
    finished: tuple  # ((kind, participant names, merged), ...)

    def named_heap(self) -> dict:
        return {k: v for k, v in self.heap if isinstance(k, str)}


def summarize(s: MachineState, deadlock: bool = False) -> Summary:
    heap = tuple(
        (s.locnames.get(r, r), v)
        for r, v in sorted(s.heap.items())
    )
    outs = tuple((name, kind, val) for name, (kind, val) in sorted(M.outcomes(s).items()))
    return Summary(heap, s.output, outs, deadlock, s.finished)


@dataclass
class RunResult:
    state: MachineState
    deadlock: bool
    steps: int
    trace: list = field(default_factory=list)

    @property
    def summary(self) -> Summary:
        return summarize(self.state, self.deadlock)


def run(s: MachineState, policy, max_steps: int = 1_000_000, keep_trace: bool = False) -> RunResult:
    """Run until terminal or stuck."""
    trace = []
    for n in range(max_steps):
        if M.is_terminal(s):
            return RunResult(s, False, n, trace)
        picked = policy.step(s)
        if picked is None:
            return RunResult(s, True, n, trace)
        if keep_trace:
            trace.append(picked[0])
        s = picked[1]
    raise BudgetExceeded(f"no termination within {max_steps} steps")


def canonical_key(s: MachineState) -> Any:
    """Hashable state identity up to renaming of transaction ids."""
    ren: dict[int, int] = {}
    for t in sorted(s.threads):
        th = s.threads[t]
        if isinstance(th, M.InTx) and th.tx not in ren:
            ren[th.tx] = len(ren)
    threads = tuple(
        (t, th if isinstance(th, M.Plain) else (ren[th.tx], th.term, th.ctx, th.snapshot))
        for t, th in sorted(s.threads.items())
    )
    wm = tuple(sorted((r, v, ren.get(k, -1 - k)) for r, (v, k) in s.wm.items()))
    reads = tuple(sorted((ren[k], rs) for k, rs in s.reads.items() if k in ren))
    merged = frozenset(ren[k] for k in s.merged if k in ren)
    return (
        threads, tuple(sorted(s.heap.items())), wm, tuple(sorted(s.parent.items())),
        s.input, s.output, tuple(sorted(s.versions.items())), reads,
        tuple(sorted(s.waiting.items())), s.next_thread, s.next_loc, s.finished, merged,
    )


@dataclass
class ExploreResult:
    terminals: set
    states: int
    truncated: bool

    @property
    def deadlocks(self) -> set:
        return {t for t in self.terminals if t.deadlock}

    @property
    def all_deadlock(self) -> bool:
        return bool(self.terminals) and all(t.deadlock for t in self.terminals)


def explore(p, max_depth: int = 200, budget: int = 200_000, input: str = "") -> ExploreResult:
    """Depth-first enumeration of all schedules up to ``max_depth`` steps.

    ``p`` is a :class:`~otm.syntax.SourceProgram` or an initial state.
    Visited states are memoized up to renaming of transaction ids.
    """
    start = p if isinstance(p, MachineState) else M.load_program(p, input=input)
    terminals: set[Summary] = set()
    seen: dict[Any, int] = {}
    stack = [(start, 0)]
    truncated = False
    while stack:
        s, depth = stack.pop()
        key = canonical_key(s)
        if seen.get(key, max_depth + 1) <= depth:
            continue
        seen[key] = depth
        if len(seen) > budget:
            raise BudgetExceeded(f"more than {budget} states")
        if M.is_terminal(s):
            terminals.add(summarize(s))
            continue
        succ = successors(s)
        if not succ:
            terminals.add(summarize(s, deadlock=True))
            continue
        if depth >= max_depth:
            truncated = True
            continue
        for _, nxt in reversed(succ):
            stack.append((nxt, depth + 1))
    return ExploreResult(terminals, len(seen), truncated)
